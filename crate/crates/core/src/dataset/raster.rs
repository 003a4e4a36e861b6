use thiserror::Error;

use crate::types::Point2;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("non-finite sample position ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("cannot bilinearly sample a {0:?} raster")]
    WrongKind(RasterKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterKind {
    /// Two interleaved channels: (dx, dy).
    Flow2,
    Scalar,
    /// Binary, one byte per texel.
    Mask,
    /// `channels` interleaved components of a unit vector.
    Feature,
}

/// Dense row-major float raster with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    kind: RasterKind,
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    /// Wraps a buffer. Returns `None` if the length does not match the dims or
    /// the kind/channel combination is inconsistent.
    pub fn new(
        kind: RasterKind,
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Option<Self> {
        let channels_ok = match kind {
            RasterKind::Flow2 => channels == 2,
            RasterKind::Scalar => channels == 1,
            RasterKind::Feature => channels >= 1,
            RasterKind::Mask => false,
        };
        if !channels_ok || width == 0 || height == 0 || data.len() != width * height * channels {
            return None;
        }
        Some(Self {
            kind,
            width,
            height,
            channels,
            data,
        })
    }

    pub fn scalar(width: usize, height: usize, data: Vec<f32>) -> Option<Self> {
        Self::new(RasterKind::Scalar, width, height, 1, data)
    }

    pub fn flow(width: usize, height: usize, data: Vec<f32>) -> Option<Self> {
        Self::new(RasterKind::Flow2, width, height, 2, data)
    }

    pub fn feature(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Option<Self> {
        Self::new(RasterKind::Feature, width, height, channels, data)
    }

    pub fn filled(kind: RasterKind, width: usize, height: usize, value: &[f32]) -> Option<Self> {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(width * height * value.len())
            .collect();
        Self::new(kind, width, height, value.len(), data)
    }

    pub fn kind(&self) -> RasterKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn texel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Bilinear interpolation of the four texels around `pos`, writing one
    /// value per channel into `out`. Positions outside the raster are clamped
    /// to the border row/column.
    pub fn sample_into(&self, pos: Point2, out: &mut [f64]) -> Result<(), SampleError> {
        if self.kind == RasterKind::Mask {
            return Err(SampleError::WrongKind(self.kind));
        }
        if !pos.is_finite() {
            return Err(SampleError::NonFinite(pos.x, pos.y));
        }
        debug_assert_eq!(out.len(), self.channels);
        let (x0, x1, fx) = axis(pos.x, self.width);
        let (y0, y1, fy) = axis(pos.y, self.height);
        let t00 = self.texel(x0, y0);
        let t10 = self.texel(x1, y0);
        let t01 = self.texel(x0, y1);
        let t11 = self.texel(x1, y1);
        for (c, o) in out.iter_mut().enumerate() {
            let top = f64::from(t00[c]) * (1.0 - fx) + f64::from(t10[c]) * fx;
            let bottom = f64::from(t01[c]) * (1.0 - fx) + f64::from(t11[c]) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        Ok(())
    }

    pub fn sample_bilinear(&self, pos: Point2) -> Result<Vec<f64>, SampleError> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(pos, &mut out)?;
        Ok(out)
    }

    pub fn sample_scalar(&self, pos: Point2) -> Result<f64, SampleError> {
        let mut out = [0.0];
        self.sample_into(pos, &mut out)?;
        Ok(out[0])
    }

    pub fn sample_vec2(&self, pos: Point2) -> Result<Point2, SampleError> {
        let mut out = [0.0; 2];
        self.sample_into(pos, &mut out)?;
        Ok(Point2::new(out[0], out[1]))
    }
}

/// Lower texel, upper texel and the fractional weight of the upper one.
fn axis(v: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let c = v.clamp(0.0, max);
    let lo = c.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - lo)
}

/// Binary raster, one byte per texel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl MaskRaster {
    /// Returns `None` on a length mismatch. Values other than 0/1 are kept so
    /// that validation can report them.
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (width > 0 && height > 0 && data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Texel nearest to `pos`, or `None` when it falls outside the raster.
    pub fn nearest_texel(&self, pos: Point2) -> Option<(usize, usize)> {
        if !pos.is_finite() {
            return None;
        }
        let x = pos.x.round();
        let y = pos.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }

    /// Nearest-neighbour lookup; anything outside the raster is `false`.
    pub fn sample(&self, pos: Point2) -> bool {
        self.nearest_texel(pos)
            .map(|(x, y)| self.get(x, y))
            .unwrap_or(false)
    }
}
