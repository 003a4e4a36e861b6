//! Synthetic containers with analytic ground truth.
//!
//! A scene is a static background plus axis-aligned boxes that translate
//! along a motion model. Flow for a pair `(j, i)` is the true displacement of
//! whichever layer covers the pixel in frame `j`, plus one Gaussian noise
//! vector per layer drawn with variance `flow_noise_sigma² · |i - j|` per
//! axis. Uncertainty rasters store `uncertainty_honesty · flow_noise_sigma ·
//! sqrt(|i - j|)`.
//!
//! An occlusion window `[start, end)` zeroes the occlusion confidence on the
//! object's pixels for every pair whose frame span touches the window. Windows
//! restricted to one direction model flow failure only and leave ground-truth
//! visibility untouched.
//!
//! Script text uses the engine config dialect with `[object]` blocks:
//!
//! ```text
//! width = 48
//! height = 48
//! num_frames = 60
//! seed = 7
//! flow_noise_sigma = 0.2
//!
//! [object]
//! box = 8,8,40,40
//! velocity = 0.25,0
//! queries = 0:20,20
//! occlusion = 20..30
//! keypoint_frames = 30
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::IntervalSchedule;
use crate::dataset::{
    required_flow_pairs, DatasetContainer, DatasetError, FeatureSet, FlowRasters, GroundTruth,
    GtPoint, Keypoint, MaskRaster, Raster,
};
use crate::types::{ObjectId, Point2, QueryPoint};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid script: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::Invalid(msg.into()))
}

/// Box translation over time, relative to frame 0.
#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    Constant {
        velocity: Point2,
    },
    /// `velocity·t + amplitude·sin(2π·t/period + phase)`, shifted so the
    /// offset at frame 0 is zero.
    Sinusoidal {
        velocity: Point2,
        amplitude: Point2,
        period: f64,
        phase: f64,
    },
    /// Piecewise-linear through `(frame, offset)` keys, held constant outside.
    Keyframes(Vec<(f64, Point2)>),
}

impl Motion {
    pub fn offset(&self, t: f64) -> Point2 {
        match self {
            Motion::Constant { velocity } => *velocity * t,
            Motion::Sinusoidal {
                velocity,
                amplitude,
                period,
                phase,
            } => {
                let s = (TAU * t / period + phase).sin() - phase.sin();
                *velocity * t + *amplitude * s
            }
            Motion::Keyframes(keys) => {
                let (first, last) = (keys[0], keys[keys.len() - 1]);
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let k = keys
                    .windows(2)
                    .find(|w| t <= w[1].0)
                    .expect("t inside keys");
                let a = (t - k[0].0) / (k[1].0 - k[0].0);
                k[0].1 + (k[1].1 - k[0].1) * a
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowDirection {
    Both,
    Forward,
    Backward,
}

impl FromStr for WindowDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::Both),
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            _ => Err(format!("unknown window direction '{s}'")),
        }
    }
}

impl fmt::Display for WindowDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Both => "both",
            Self::Forward => "forward",
            Self::Backward => "backward",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcclusionWindow {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub direction: WindowDirection,
    /// Keypoints inside the window are withheld unless this is set.
    pub keypoints_supplied: bool,
}

impl OcclusionWindow {
    pub fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            direction: WindowDirection::Both,
            keypoints_supplied: false,
        }
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }

    /// Whether flow `source -> target` is invalidated by this window.
    pub fn blocks(&self, source: usize, target: usize) -> bool {
        let dir_ok = match self.direction {
            WindowDirection::Both => true,
            WindowDirection::Forward => source < target,
            WindowDirection::Backward => source > target,
        };
        let (lo, hi) = (source.min(target), source.max(target));
        dir_ok && lo < self.end && hi >= self.start
    }
}

/// `start..end[:direction][:withheld|supplied]`
impl FromStr for OcclusionWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':').map(str::trim);
        let range = parts.next().unwrap_or_default();
        let (a, b) = range
            .split_once("..")
            .ok_or_else(|| format!("expected start..end, got '{range}'"))?;
        let mut w = Self::new(parse_num(a)?, parse_num(b)?);
        for p in parts {
            match p {
                "withheld" => w.keypoints_supplied = false,
                "supplied" => w.keypoints_supplied = true,
                d => w.direction = d.parse()?,
            }
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSchedule {
    pub frames: BTreeSet<usize>,
    /// Positional noise per axis.
    pub sigma: f64,
    pub confidence: f32,
}

impl Default for KeypointSchedule {
    fn default() -> Self {
        Self {
            frames: BTreeSet::new(),
            sigma: 0.0,
            confidence: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectScript {
    pub id: ObjectId,
    /// Box corners at frame 0; a pixel centre `(x, y)` is inside when
    /// `min.x <= x < max.x` and likewise for `y`.
    pub box_min: Point2,
    pub box_max: Point2,
    pub motion: Motion,
    pub windows: Vec<OcclusionWindow>,
    pub keypoints: KeypointSchedule,
    /// Feature signature; normalised on use. Defaults to a basis vector.
    pub signature: Option<Vec<f64>>,
    /// `(target object, similarity)`: the signature is built to have exactly
    /// this cosine similarity to the target's.
    pub distractor_of: Option<(ObjectId, f64)>,
    /// `(frame, position)` pairs.
    pub queries: Vec<(usize, Point2)>,
    /// `(frame, count)`: a regular grid of queries inside the box.
    pub query_grid: Option<(usize, usize)>,
}

impl ObjectScript {
    pub fn new(id: ObjectId, box_min: Point2, box_max: Point2) -> Self {
        Self {
            id,
            box_min,
            box_max,
            motion: Motion::Constant {
                velocity: Point2::ZERO,
            },
            windows: Vec::new(),
            keypoints: KeypointSchedule::default(),
            signature: None,
            distractor_of: None,
            queries: Vec::new(),
            query_grid: None,
        }
    }

    fn contains(&self, offset: Point2, x: f64, y: f64) -> bool {
        let (lo, hi) = (self.box_min + offset, self.box_max + offset);
        x >= lo.x && x < hi.x && y >= lo.y && y < hi.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneScript {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub seed: u64,
    pub intervals: IntervalSchedule,
    pub flow_noise_sigma: f64,
    pub uncertainty_honesty: f64,
    /// Zero disables feature rasters.
    pub feature_channels: usize,
    pub feature_stride: usize,
    pub objects: Vec<ObjectScript>,
}

impl SceneScript {
    pub fn new(width: usize, height: usize, num_frames: usize) -> Self {
        Self {
            width,
            height,
            num_frames,
            seed: 0,
            intervals: IntervalSchedule::default(),
            flow_noise_sigma: 0.0,
            uncertainty_honesty: 1.0,
            feature_channels: 0,
            feature_stride: 1,
            objects: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut s = Self::new(0, 0, 0);
        let mut current: Option<ObjectScript> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| SynthError::Parse {
                line: idx + 1,
                message,
            };
            if line == "[object]" {
                s.objects.extend(current.take());
                let id = s.objects.len() as ObjectId + 1;
                current = Some(ObjectScript::new(id, Point2::ZERO, Point2::ZERO));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            match current.as_mut() {
                None => s.set(k, v),
                Some(o) => set_object(o, k, v),
            }
            .map_err(err)?;
        }
        s.objects.extend(current);
        s.validate()?;
        Ok(s)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "width" => self.width = parse_num(value)?,
            "height" => self.height = parse_num(value)?,
            "num_frames" => self.num_frames = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "intervals" => self.intervals = value.parse()?,
            "flow_noise_sigma" => self.flow_noise_sigma = parse_num(value)?,
            "uncertainty_honesty" => self.uncertainty_honesty = parse_num(value)?,
            "feature_channels" => self.feature_channels = parse_num(value)?,
            "feature_stride" => self.feature_stride = parse_num(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return invalid("width, height and num_frames must be positive");
        }
        self.intervals
            .check()
            .map_err(|e| SynthError::Invalid(e.to_string()))?;
        if !(self.flow_noise_sigma >= 0.0 && self.flow_noise_sigma.is_finite()) {
            return invalid("flow_noise_sigma must be >= 0");
        }
        if !(self.uncertainty_honesty >= 0.0 && self.uncertainty_honesty.is_finite()) {
            return invalid("uncertainty_honesty must be >= 0");
        }
        if self.feature_stride == 0 {
            return invalid("feature_stride must be positive");
        }
        let ids: BTreeSet<_> = self.objects.iter().map(|o| o.id).collect();
        if ids.len() != self.objects.len() {
            return invalid("duplicate object ids");
        }
        let t = self.num_frames;
        for o in &self.objects {
            let name = format!("object {}", o.id);
            if !(o.box_min.x < o.box_max.x && o.box_min.y < o.box_max.y) {
                return invalid(format!("{name}: empty box"));
            }
            match &o.motion {
                Motion::Sinusoidal { period, .. } if period.is_nan() || *period <= 0.0 => {
                    return invalid(format!("{name}: period must be positive"));
                }
                Motion::Keyframes(k) if k.is_empty() => {
                    return invalid(format!("{name}: no keyframes"));
                }
                Motion::Keyframes(k) if k.windows(2).any(|w| w[0].0 >= w[1].0) => {
                    return invalid(format!("{name}: keyframes not strictly increasing"));
                }
                _ => {}
            }
            for w in &o.windows {
                if w.start >= w.end || w.end > t {
                    return invalid(format!(
                        "{name}: window {}..{} outside [0, {t})",
                        w.start, w.end
                    ));
                }
            }
            let kp = &o.keypoints;
            if !(kp.sigma >= 0.0 && kp.sigma.is_finite()) {
                return invalid(format!("{name}: keypoint_sigma must be >= 0"));
            }
            if !(0.0..=1.0).contains(&kp.confidence) {
                return invalid(format!("{name}: keypoint_confidence out of [0,1]"));
            }
            if kp.frames.iter().any(|&f| f >= t) {
                return invalid(format!("{name}: keypoint frame out of range"));
            }
            if let Some(sig) = &o.signature {
                if sig.len() != self.feature_channels {
                    return invalid(format!("{name}: signature length != feature_channels"));
                }
                if sig.iter().map(|v| v * v).sum::<f64>() <= 0.0 {
                    return invalid(format!("{name}: zero signature"));
                }
            }
            if let Some((target, s)) = o.distractor_of {
                if !(0.0..=1.0).contains(&s) {
                    return invalid(format!("{name}: similarity out of [0,1]"));
                }
                let Some(tobj) = self.objects.iter().find(|p| p.id == target) else {
                    return invalid(format!("{name}: distractor of unknown object {target}"));
                };
                if target == o.id || tobj.distractor_of.is_some() {
                    return invalid(format!("{name}: distractor target must be a plain object"));
                }
                if self.feature_channels < 2 {
                    return invalid(format!("{name}: distractors need feature_channels >= 2"));
                }
            }
            let grid = o.query_grid.iter().map(|&(f, _)| (f, None));
            let explicit = o.queries.iter().map(|&(f, p)| (f, Some(p)));
            for (f, p) in grid.chain(explicit) {
                if f >= t {
                    return invalid(format!("{name}: query frame {f} out of range"));
                }
                if let Some(p) = p {
                    let off = o.motion.offset(f as f64);
                    if !o.contains(off, p.x, p.y) || !in_image(self.width, self.height, p) {
                        return invalid(format!(
                            "{name}: query ({}, {}) not inside the box at frame {f}",
                            p.x, p.y
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn set_object(o: &mut ObjectScript, key: &str, value: &str) -> Result<(), String> {
    match key {
        "id" => o.id = parse_num(value)?,
        "box" => {
            let v = parse_list(value)?;
            if v.len() != 4 {
                return Err("box needs x0,y0,x1,y1".into());
            }
            o.box_min = Point2::new(v[0], v[1]);
            o.box_max = Point2::new(v[2], v[3]);
        }
        "motion" => {
            o.motion = match value {
                "constant" => Motion::Constant {
                    velocity: Point2::ZERO,
                },
                "sinusoidal" => Motion::Sinusoidal {
                    velocity: Point2::ZERO,
                    amplitude: Point2::ZERO,
                    period: 1.0,
                    phase: 0.0,
                },
                "keyframes" => Motion::Keyframes(vec![(0.0, Point2::ZERO)]),
                _ => return Err(format!("unknown motion '{value}'")),
            }
        }
        "velocity" => {
            let v = parse_point(value)?;
            match &mut o.motion {
                Motion::Constant { velocity } | Motion::Sinusoidal { velocity, .. } => {
                    *velocity = v
                }
                Motion::Keyframes(_) => return Err("keyframe motion has no velocity".into()),
            }
        }
        "amplitude" | "period" | "phase" => {
            let Motion::Sinusoidal {
                amplitude,
                period,
                phase,
                ..
            } = &mut o.motion
            else {
                return Err(format!("{key} needs motion = sinusoidal"));
            };
            match key {
                "amplitude" => *amplitude = parse_point(value)?,
                "period" => *period = parse_num(value)?,
                _ => *phase = parse_num(value)?,
            }
        }
        "keyframes" => {
            let keys = value
                .split(';')
                .map(|kv| {
                    let (f, p) = kv
                        .split_once(':')
                        .ok_or_else(|| format!("expected frame:x,y, got '{kv}'"))?;
                    Ok((parse_num(f)?, parse_point(p)?))
                })
                .collect::<Result<Vec<_>, String>>()?;
            o.motion = Motion::Keyframes(keys);
        }
        "occlusion" => o.windows.push(value.parse()?),
        "keypoint_frames" => o.keypoints.frames.extend(parse_frames(value)?),
        "keypoint_sigma" => o.keypoints.sigma = parse_num(value)?,
        "keypoint_confidence" => o.keypoints.confidence = parse_num(value)?,
        "signature" => o.signature = Some(parse_list(value)?),
        "distractor_of" => {
            let s = o.distractor_of.map_or(1.0, |d| d.1);
            o.distractor_of = Some((parse_num(value)?, s));
        }
        "similarity" => {
            let target = o.distractor_of.map_or(0, |d| d.0);
            o.distractor_of = Some((target, parse_num(value)?));
        }
        "queries" => {
            for q in value.split(';').map(str::trim).filter(|q| !q.is_empty()) {
                let (f, p) = q
                    .split_once(':')
                    .ok_or_else(|| format!("expected frame:x,y, got '{q}'"))?;
                o.queries.push((parse_num(f)?, parse_point(p)?));
            }
        }
        "query_grid" => {
            let (f, n) = value
                .split_once(':')
                .ok_or_else(|| format!("expected frame:count, got '{value}'"))?;
            o.query_grid = Some((parse_num(f)?, parse_num(n)?));
        }
        _ => return Err(format!("unknown object key '{key}'")),
    }
    Ok(())
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("bad number '{}'", s.trim()))
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(parse_num).collect()
}

fn parse_point(s: &str) -> Result<Point2, String> {
    match parse_list(s)?.as_slice() {
        [x, y] => Ok(Point2::new(*x, *y)),
        _ => Err(format!("expected x,y, got '{s}'")),
    }
}

/// `3,5,10..20` (ranges exclusive at the end).
fn parse_frames(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok.split_once("..") {
            Some((a, b)) => out.extend(parse_num::<usize>(a)?..parse_num::<usize>(b)?),
            None => out.push(parse_num(tok)?),
        }
    }
    Ok(out)
}

fn in_image(width: usize, height: usize, p: Point2) -> bool {
    p.x >= -0.5 && p.y >= -0.5 && p.x <= width as f64 - 0.5 && p.y <= height as f64 - 0.5
}

/// Deterministic per-raster seed.
fn derive_seed(seed: u64, tag: u64, a: usize, b: usize) -> u64 {
    let mut z = seed ^ tag.rotate_left(17);
    for v in [a as u64, b as u64] {
        z = z.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TAG_FLOW: u64 = 1;
const TAG_KEYPOINT: u64 = 2;

fn gaussian_pair(rng: &mut ChaCha8Rng, sigma: f64) -> Point2 {
    if sigma == 0.0 {
        return Point2::ZERO;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Point2::new(n.sample(rng), n.sample(rng))
}

struct Scene<'a> {
    script: &'a SceneScript,
    /// `[object][frame]`
    offsets: Vec<Vec<Point2>>,
}

impl Scene<'_> {
    /// Topmost object covering pixel centre `(x, y)` at frame `t`.
    fn layer_at(&self, t: usize, x: f64, y: f64) -> Option<usize> {
        (0..self.script.objects.len())
            .rev()
            .find(|&k| self.script.objects[k].contains(self.offsets[k][t], x, y))
    }

    fn flow_pair(&self, j: usize, i: usize) -> FlowRasters {
        let s = self.script;
        let (w, h) = (s.width, s.height);
        let gap = j.abs_diff(i) as f64;
        let std = s.flow_noise_sigma * gap.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, TAG_FLOW, j, i));
        let background = gaussian_pair(&mut rng, std);
        let noise: Vec<Point2> = s
            .objects
            .iter()
            .map(|_| gaussian_pair(&mut rng, std))
            .collect();
        let blocked: Vec<bool> = s
            .objects
            .iter()
            .map(|o| o.windows.iter().any(|win| win.blocks(j, i)))
            .collect();
        let mut flow = Vec::with_capacity(w * h * 2);
        let mut occ = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (d, c) = match self.layer_at(j, x as f64, y as f64) {
                    Some(k) => (
                        self.offsets[k][i] - self.offsets[k][j] + noise[k],
                        if blocked[k] { 0.0 } else { 1.0 },
                    ),
                    None => (background, 1.0),
                };
                flow.push(d.x as f32);
                flow.push(d.y as f32);
                occ.push(c);
            }
        }
        let unc = (s.uncertainty_honesty * std) as f32;
        FlowRasters {
            flow: Raster::flow(w, h, flow).expect("sized"),
            occ: Raster::scalar(w, h, occ).expect("sized"),
            unc: Raster::scalar(w, h, vec![unc; w * h]).expect("sized"),
        }
    }

    fn signatures(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let s = self.script;
        let c = s.feature_channels;
        let basis = |k: usize| {
            let mut v = vec![0.0; c];
            v[k % c] = 1.0;
            v
        };
        let normalise = |v: &[f64]| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / n).collect::<Vec<_>>()
        };
        let mut sigs: Vec<Vec<f64>> = s
            .objects
            .iter()
            .enumerate()
            .map(|(k, o)| {
                o.signature
                    .as_deref()
                    .map_or_else(|| basis(k + 1), normalise)
            })
            .collect();
        for (k, o) in s.objects.iter().enumerate() {
            let Some((target, sim)) = o.distractor_of else {
                continue;
            };
            let t = &sigs[s
                .objects
                .iter()
                .position(|p| p.id == target)
                .expect("validated")];
            // Unit vector orthogonal to the target signature.
            let orth = (0..c)
                .rev()
                .find_map(|m| {
                    let e = basis(m);
                    let dot: f64 = e.iter().zip(t).map(|(a, b)| a * b).sum();
                    let r: Vec<f64> = e.iter().zip(t).map(|(a, b)| a - dot * b).collect();
                    let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                    (n > 1e-6).then(|| r.iter().map(|a| a / n).collect::<Vec<_>>())
                })
                .expect("at least two channels");
            let q = (1.0 - sim * sim).max(0.0).sqrt();
            sigs[k] = t.iter().zip(&orth).map(|(a, b)| sim * a + q * b).collect();
        }
        (basis(0), sigs)
    }

    fn features(&self, queries: &[(usize, QueryPoint)]) -> Option<FeatureSet> {
        let s = self.script;
        let c = s.feature_channels;
        if c == 0 {
            return None;
        }
        let (background, sigs) = self.signatures();
        let wf = s.width.div_ceil(s.feature_stride);
        let hf = s.height.div_ceil(s.feature_stride);
        let frames = (0..s.num_frames)
            .into_par_iter()
            .map(|t| {
                let mut data = Vec::with_capacity(wf * hf * c);
                for v in 0..hf {
                    for u in 0..wf {
                        let x = (u as f64 + 0.5) * s.width as f64 / wf as f64 - 0.5;
                        let y = (v as f64 + 0.5) * s.height as f64 / hf as f64 - 0.5;
                        let sig = self.layer_at(t, x, y).map_or(&background, |k| &sigs[k]);
                        data.extend(sig.iter().map(|&a| a as f32));
                    }
                }
                Raster::feature(wf, hf, c, data).expect("sized")
            })
            .collect();
        let queries = queries
            .iter()
            .map(|&(k, _)| sigs[k].iter().map(|&a| a as f32).collect())
            .collect();
        Some(FeatureSet {
            width: wf,
            height: hf,
            channels: c,
            frames,
            queries,
        })
    }
}

fn grid_positions(o: &ObjectScript, offset: Point2, w: usize, h: usize, n: usize) -> Vec<Point2> {
    let lo = o.box_min + offset;
    let hi = o.box_max + offset;
    let (x0, y0) = (lo.x.max(-0.5), lo.y.max(-0.5));
    let (x1, y1) = (hi.x.min(w as f64 - 0.5), hi.y.min(h as f64 - 0.5));
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    (0..n)
        .map(|k| {
            let (c, r) = (k % cols, k / cols);
            Point2::new(
                x0 + (c as f64 + 0.5) * (x1 - x0) / cols as f64,
                y0 + (r as f64 + 0.5) * (y1 - y0) / rows as f64,
            )
        })
        .collect()
}

/// Builds the container described by `script`, with ground truth attached.
pub fn generate(script: &SceneScript) -> Result<(DatasetContainer, GroundTruth), SynthError> {
    script.validate()?;
    let (w, h, t_len) = (script.width, script.height, script.num_frames);
    let scene = Scene {
        script,
        offsets: script
            .objects
            .iter()
            .map(|o| (0..t_len).map(|t| o.motion.offset(t as f64)).collect())
            .collect(),
    };

    // (object index, query)
    let mut queries: Vec<(usize, QueryPoint)> = Vec::new();
    for (k, o) in script.objects.iter().enumerate() {
        let mut push = |frame: usize, position: Point2| {
            queries.push((
                k,
                QueryPoint {
                    query_frame: frame,
                    position,
                    object_id: o.id,
                },
            ))
        };
        for &(f, p) in &o.queries {
            push(f, p);
        }
        if let Some((f, n)) = o.query_grid {
            for p in grid_positions(o, scene.offsets[k][f], w, h, n) {
                push(f, p);
            }
        }
    }
    if queries.is_empty() {
        return invalid("script defines no queries");
    }

    let gt: GroundTruth = queries
        .iter()
        .map(|&(k, q)| {
            let o = &script.objects[k];
            let base = q.position - scene.offsets[k][q.query_frame];
            (0..t_len)
                .map(|t| {
                    let position = base + scene.offsets[k][t];
                    let occluded = o
                        .windows
                        .iter()
                        .any(|win| win.direction == WindowDirection::Both && win.contains(t));
                    GtPoint {
                        position,
                        visible: t == q.query_frame || (!occluded && in_image(w, h, position)),
                    }
                })
                .collect()
        })
        .collect();

    let keypoints = queries
        .iter()
        .enumerate()
        .map(|(qi, &(k, q))| {
            let o = &script.objects[k];
            let mut track = vec![None; t_len];
            for &t in &o.keypoints.frames {
                let withheld = o
                    .windows
                    .iter()
                    .any(|win| win.contains(t) && !win.keypoints_supplied);
                let truth = gt[qi][t].position;
                if withheld || t == q.query_frame || !in_image(w, h, truth) {
                    continue;
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(script.seed, TAG_KEYPOINT, qi, t));
                let p = truth + gaussian_pair(&mut rng, o.keypoints.sigma);
                track[t] = Some(Keypoint {
                    x: p.x as f32,
                    y: p.y as f32,
                    confidence: o.keypoints.confidence,
                });
            }
            track
        })
        .collect();

    let mut container = DatasetContainer::new(w, h, t_len);
    container.schedule = script.intervals.clone();
    container.queries = queries.iter().map(|&(_, q)| q).collect();
    let anchors = container.anchor_frames();
    let pairs: Vec<_> = required_flow_pairs(t_len, &script.intervals, anchors)
        .into_iter()
        .collect();
    container.flows = pairs
        .par_iter()
        .map(|&(j, i)| ((j, i), scene.flow_pair(j, i)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    container.masks = script
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let frames = (0..t_len)
                .map(|t| {
                    let off = scene.offsets[k][t];
                    MaskRaster::from_fn(w, h, |x, y| o.contains(off, x as f64, y as f64))
                })
                .collect();
            (o.id, frames)
        })
        .collect::<BTreeMap<_, _>>();
    container.features = scene.features(&queries);
    container.keypoints = keypoints;
    container.ground_truth = Some(gt.clone());
    container.notes.insert("generator".into(), "synth".into());
    container
        .notes
        .insert("seed".into(), script.seed.to_string());
    container.validate()?;
    Ok((container, gt))
}

/// One slot of the interval schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Interval {
    Anchor,
    Offset(usize),
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interval::Anchor => f.write_str("inf"),
            Interval::Offset(k) => write!(f, "{k}"),
        }
    }
}

pub fn schedule_intervals(schedule: &IntervalSchedule) -> Vec<Interval> {
    let anchor = schedule.anchor.then_some(Interval::Anchor);
    anchor
        .into_iter()
        .chain(schedule.offsets.iter().map(|&k| Interval::Offset(k)))
        .collect()
}

/// Forward track of `query` using a single interval: frame `i` is reached
/// from frame `i - k`, or straight from the query frame while `i - k` lies
/// before it. Flow validity is ignored. `None` where a needed raster is
/// missing.
pub fn single_interval_track(
    container: &DatasetContainer,
    query: usize,
    interval: Interval,
) -> Vec<Option<Point2>> {
    let q = container.queries[query];
    let qf = q.query_frame;
    let mut track = vec![None; container.num_frames];
    track[qf] = Some(q.position);
    let hop = |from: Option<Point2>, j: usize, i: usize| {
        let p = from?;
        let d = container.flow(j, i)?.flow.sample_vec2(p).ok()?;
        Some(p + d)
    };
    for i in qf + 1..container.num_frames {
        track[i] = match interval {
            Interval::Offset(k) if i >= qf + k => hop(track[i - k], i - k, i),
            _ => hop(Some(q.position), qf, i),
        };
    }
    track
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalRmse {
    pub interval: Interval,
    pub rmse: f64,
    /// Frames that entered the RMSE.
    pub frames: usize,
}

/// RMSE of each single-interval estimator over the frames after the query
/// frame where ground truth is visible and the estimator produced a value.
pub fn oracle_best_single(
    container: &DatasetContainer,
    query: usize,
    gt: &GroundTruth,
) -> Vec<IntervalRmse> {
    let qf = container.queries[query].query_frame;
    schedule_intervals(&container.schedule)
        .into_iter()
        .map(|interval| {
            let track = single_interval_track(container, query, interval);
            let (mut sum, mut n) = (0.0, 0);
            for t in qf + 1..container.num_frames {
                let g = gt[query][t];
                if let (Some(p), true) = (track[t], g.visible) {
                    sum += (p - g.position).norm().powi(2);
                    n += 1;
                }
            }
            IntervalRmse {
                interval,
                rmse: if n == 0 { 0.0 } else { (sum / n as f64).sqrt() },
                frames: n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple(noise: f64) -> SceneScript {
        let mut s = SceneScript::new(24, 16, 12);
        s.flow_noise_sigma = noise;
        s.seed = 3;
        let mut o = ObjectScript::new(1, Point2::new(-40.0, -40.0), Point2::new(80.0, 80.0));
        o.motion = Motion::Constant {
            velocity: Point2::new(1.0, 0.0),
        };
        o.queries.push((0, Point2::new(4.0, 8.0)));
        s.objects.push(o);
        s
    }

    #[test]
    fn constant_velocity_flow_is_exact() {
        let (c, gt) = generate(&simple(0.0)).unwrap();
        for (&(j, i), f) in &c.flows {
            let d = f.flow.sample_vec2(Point2::new(5.0, 5.0)).unwrap();
            assert_eq!(d, Point2::new(i as f64 - j as f64, 0.0), "pair {j}->{i}");
            assert_eq!(f.occ.sample_scalar(Point2::ZERO).unwrap(), 1.0);
        }
        assert_eq!(gt[0][7].position, Point2::new(11.0, 8.0));
        for e in oracle_best_single(&c, 0, &gt) {
            assert_eq!(e.rmse, 0.0, "{}", e.interval);
        }
    }

    #[test]
    fn occlusion_window_zeroes_spanning_pairs() {
        let mut s = simple(0.0);
        s.num_frames = 40;
        s.objects[0].motion = Motion::Constant {
            velocity: Point2::new(0.25, 0.0),
        };
        s.objects[0].windows.push(OcclusionWindow::new(20, 30));
        let (c, gt) = generate(&s).unwrap();
        for (&(j, i), f) in &c.flows {
            let occ = f.occ.sample_scalar(Point2::new(5.0, 5.0)).unwrap();
            if (20..30).contains(&i) {
                assert_eq!(occ, 0.0, "{j}->{i}");
            }
            let spans = j.min(i) < 30 && j.max(i) >= 20;
            assert_eq!(occ == 0.0, spans, "{j}->{i}");
        }
        assert!(!gt[0][25].visible && gt[0][30].visible && gt[0][19].visible);
    }

    #[test]
    fn deterministic_given_seed() {
        let s = simple(0.7);
        assert_eq!(generate(&s).unwrap().0, generate(&s).unwrap().0);
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(
            generate(&s).unwrap().0.flows,
            generate(&other).unwrap().0.flows
        );
    }

    #[test]
    fn uncertainty_is_honest_and_scaled() {
        let mut s = simple(0.5);
        s.uncertainty_honesty = 2.0;
        let (c, _) = generate(&s).unwrap();
        let u = c
            .flow(0, 4)
            .unwrap()
            .unc
            .sample_scalar(Point2::ZERO)
            .unwrap();
        assert!((u - 2.0 * 0.5 * 2.0).abs() < 1e-6);
    }

    #[test]
    fn distractor_similarity_is_exact() {
        let mut s = simple(0.0);
        s.feature_channels = 6;
        let mut d = ObjectScript::new(2, Point2::new(0.0, 0.0), Point2::new(3.0, 3.0));
        d.distractor_of = Some((1, 0.4));
        s.objects.push(d);
        let (c, _) = generate(&s).unwrap();
        let f = c.features.as_ref().unwrap();
        let target = &f.queries[0];
        let texel = f.frames[0].texel(1, 1);
        let dot: f64 = target
            .iter()
            .zip(texel)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum();
        assert!((dot - 0.4).abs() < 1e-6);
        let own = f.frames[0].texel(10, 10);
        assert_eq!(own, target.as_slice());
    }

    #[test]
    fn script_text() {
        let text = "width = 32\nheight = 24\nnum_frames = 20\nseed = 9\n\
            flow_noise_sigma = 0.1\nfeature_channels = 4\n\n[object]\nbox = 2,2,20,20\n\
            motion = sinusoidal\nvelocity = 0.2,0\namplitude = 1,1\nperiod = 10\n\
            queries = 0:5,5; 3:10,10\nquery_grid = 0:4\nocclusion = 5..8:forward:supplied\n\
            keypoint_frames = 1,10..12\nkeypoint_sigma = 0.5\n\n[object]\nid = 7\n\
            box = 0,0,4,4\ndistractor_of = 1\nsimilarity = 0.8\n";
        let s = SceneScript::parse(text).unwrap();
        assert_eq!(s.objects.len(), 2);
        assert_eq!(s.objects[1].id, 7);
        assert_eq!(s.objects[1].distractor_of, Some((1, 0.8)));
        let w = s.objects[0].windows[0];
        assert_eq!(w.direction, WindowDirection::Forward);
        assert!(w.keypoints_supplied);
        assert_eq!(
            s.objects[0]
                .keypoints
                .frames
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![1, 10, 11]
        );
        let (c, _) = generate(&s).unwrap();
        assert_eq!(c.queries.len(), 6);
        assert!(c.keypoint(0, 10).is_some() && c.keypoint(0, 2).is_none());
    }

    #[test]
    fn script_errors() {
        assert!(matches!(
            SceneScript::parse("width = 3\nbogus = 1\n"),
            Err(SynthError::Parse { line: 2, .. })
        ));
        let mut s = simple(0.0);
        s.objects[0].windows.push(OcclusionWindow::new(5, 99));
        assert!(matches!(generate(&s), Err(SynthError::Invalid(_))));
        let mut s = simple(-1.0);
        assert!(s.validate().is_err());
        s = simple(0.0);
        s.objects[0].queries[0] = (0, Point2::new(200.0, 0.0));
        assert!(s.validate().is_err());
    }

    #[test]
    fn keyframe_motion_interpolates() {
        let m = Motion::Keyframes(vec![(0.0, Point2::ZERO), (10.0, Point2::new(10.0, -5.0))]);
        assert_eq!(m.offset(5.0), Point2::new(5.0, -2.5));
        assert_eq!(m.offset(20.0), Point2::new(10.0, -5.0));
        let s = Motion::Sinusoidal {
            velocity: Point2::ZERO,
            amplitude: Point2::new(2.0, 0.0),
            period: 4.0,
            phase: 0.3,
        };
        assert_eq!(s.offset(0.0), Point2::ZERO);
    }

    #[test]
    fn interval_one_random_walk_grows_like_sqrt_t() {
        let t = 16usize;
        let trials = 1000;
        let mut sum_sq = 0.0;
        for seed in 0..trials {
            let mut s = SceneScript::new(8, 8, t + 1);
            s.intervals = IntervalSchedule::new(false, vec![1]);
            s.flow_noise_sigma = 1.0;
            s.seed = seed;
            let mut o = ObjectScript::new(1, Point2::new(-99.0, -99.0), Point2::new(99.0, 99.0));
            o.queries.push((0, Point2::new(3.5, 3.5)));
            s.objects.push(o);
            let (c, gt) = generate(&s).unwrap();
            let p = single_interval_track(&c, 0, Interval::Offset(1))[t].unwrap();
            sum_sq += (p - gt[0][t].position).norm().powi(2);
        }
        let per_axis = (sum_sq / (2.0 * trials as f64)).sqrt();
        let expected = (t as f64).sqrt();
        assert!(
            (per_axis - expected).abs() < 0.1 * expected,
            "per-axis rmse {per_axis} vs {expected}"
        );
    }
}
