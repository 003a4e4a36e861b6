//! Greedy partition of a frame into masks for dense tracking.
//!
//! Pixels are visited in row-major order. Each pixel that no earlier mask has
//! claimed seeds a new oracle call, and the returned mask claims every pixel
//! that is still unassigned.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dataset::MaskRaster;

/// Subdirectory of the container's `masks/` that holds an exported assignment.
pub const DENSE_DIR: &str = "dense";
pub const ASSIGNMENT_FILE: &str = "assignment.i32";
pub const MASK_LIST_FILE: &str = "masks.tsv";

#[derive(Debug, Error)]
pub enum DenseMaskError {
    #[error("oracle mask for seed ({x}, {y}) does not contain the seed")]
    SeedNotInMask { x: usize, y: usize },
    #[error("oracle mask is {found_w}x{found_h}, expected {width}x{height}")]
    WrongSize {
        width: usize,
        height: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Produces a binary mask containing the given seed pixel.
pub trait MaskOracle {
    fn mask_for(&mut self, x: usize, y: usize) -> MaskRaster;
}

impl<F: FnMut(usize, usize) -> MaskRaster> MaskOracle for F {
    fn mask_for(&mut self, x: usize, y: usize) -> MaskRaster {
        self(x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMask {
    pub seed: (usize, usize),
    pub mask: MaskRaster,
    /// Pixels this mask claimed (it may contain more that were taken earlier).
    pub assigned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelAssignment {
    pub width: usize,
    pub height: usize,
    /// Row-major mask id per pixel.
    pub ids: Vec<u32>,
    /// Masks in generation order; index equals mask id.
    pub masks: Vec<GeneratedMask>,
}

impl PixelAssignment {
    pub fn id(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// One oracle call is made per generated mask.
    pub fn oracle_calls(&self) -> usize {
        self.masks.len()
    }

    /// Oracle that answers with the assigned region of the seed pixel.
    pub fn region_oracle(&self) -> impl FnMut(usize, usize) -> MaskRaster + '_ {
        move |x, y| {
            let id = self.id(x, y);
            MaskRaster::from_fn(self.width, self.height, |u, v| self.id(u, v) == id)
        }
    }

    /// Writes the id raster and a mask list to `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), DenseMaskError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| DenseMaskError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let bytes: Vec<u8> = self
            .ids
            .iter()
            .flat_map(|&id| (id as i32).to_le_bytes())
            .collect();
        let p = dir.join(ASSIGNMENT_FILE);
        fs::write(&p, bytes).map_err(io(&p))?;

        let mut list = format!(
            "# {}x{}\nmask_id\tseed_x\tseed_y\tassigned\tmask_area\n",
            self.width, self.height
        );
        for (id, m) in self.masks.iter().enumerate() {
            let _ = writeln!(
                list,
                "{id}\t{}\t{}\t{}\t{}",
                m.seed.0,
                m.seed.1,
                m.assigned,
                m.mask.area()
            );
            let p = dir.join(format!("{id}.msk"));
            fs::write(&p, m.mask.data()).map_err(io(&p))?;
        }
        let p = dir.join(MASK_LIST_FILE);
        fs::write(&p, list).map_err(io(&p))
    }
}

/// Partitions a `width` x `height` frame using `oracle`.
pub fn dense_assign(
    oracle: &mut impl MaskOracle,
    width: usize,
    height: usize,
) -> Result<PixelAssignment, DenseMaskError> {
    const UNASSIGNED: u32 = u32::MAX;
    let mut ids = vec![UNASSIGNED; width * height];
    let mut masks = Vec::new();
    for start in 0..ids.len() {
        if ids[start] != UNASSIGNED {
            continue;
        }
        let (x, y) = (start % width, start / width);
        let mask = oracle.mask_for(x, y);
        if mask.width() != width || mask.height() != height {
            return Err(DenseMaskError::WrongSize {
                width,
                height,
                found_w: mask.width(),
                found_h: mask.height(),
            });
        }
        if !mask.get(x, y) {
            return Err(DenseMaskError::SeedNotInMask { x, y });
        }
        let id = masks.len() as u32;
        let mut assigned = 0;
        // Pixels before `start` are all assigned already.
        for (k, slot) in ids.iter_mut().enumerate().skip(start) {
            if *slot == UNASSIGNED && mask.data()[k] != 0 {
                *slot = id;
                assigned += 1;
            }
        }
        masks.push(GeneratedMask {
            seed: (x, y),
            mask,
            assigned,
        });
    }
    Ok(PixelAssignment {
        width,
        height,
        ids,
        masks,
    })
}

/// Oracle returning the 4-connected region of pixels sharing the seed's label.
pub fn connected_component_oracle(
    width: usize,
    height: usize,
    labels: &[u32],
) -> impl FnMut(usize, usize) -> MaskRaster + '_ {
    move |x, y| {
        let target = labels[y * width + x];
        let mut inside = vec![false; width * height];
        let mut stack = vec![(x, y)];
        inside[y * width + x] = true;
        while let Some((u, v)) = stack.pop() {
            let mut visit = |a: usize, b: usize| {
                let k = b * width + a;
                if !inside[k] && labels[k] == target {
                    inside[k] = true;
                    stack.push((a, b));
                }
            };
            if u > 0 {
                visit(u - 1, v);
            }
            if u + 1 < width {
                visit(u + 1, v);
            }
            if v > 0 {
                visit(u, v - 1);
            }
            if v + 1 < height {
                visit(u, v + 1);
            }
        }
        MaskRaster::from_fn(width, height, |u, v| inside[v * width + u])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_image_oracle() {
        let mut calls = 0;
        let mut oracle = |_, _| {
            calls += 1;
            MaskRaster::from_fn(2, 2, |_, _| true)
        };
        let a = dense_assign(&mut oracle, 2, 2).unwrap();
        assert_eq!(a.ids, vec![0; 4]);
        assert_eq!(a.masks.len(), 1);
        assert_eq!(calls, 1);
    }

    #[test]
    fn row_oracle() {
        let mut oracle = |_, y| MaskRaster::from_fn(2, 2, |_, v| v == y);
        let a = dense_assign(&mut oracle, 2, 2).unwrap();
        assert_eq!(a.ids, vec![0, 0, 1, 1]);
        let seeds: Vec<_> = a.masks.iter().map(|m| m.seed).collect();
        assert_eq!(seeds, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn quadrants() {
        // Two-colour checkerboard of 2x2 quadrants: diagonal quadrants share a
        // colour but are not 4-connected.
        let labels: Vec<u32> = (0..16)
            .map(|k| (((k % 4) / 2) ^ ((k / 4) / 2)) as u32)
            .collect();
        let mut calls = 0;
        let mut cc = connected_component_oracle(4, 4, &labels);
        let mut oracle = |x, y| {
            calls += 1;
            cc(x, y)
        };
        let a = dense_assign(&mut oracle, 4, 4).unwrap();
        assert_eq!(a.masks.len(), 4);
        assert_eq!(calls, 4);
        for y in 0..4 {
            for x in 0..4 {
                let quadrant = (y / 2) * 2 + x / 2;
                let expected = [0, 1, 2, 3][quadrant];
                assert_eq!(a.id(x, y), expected);
            }
        }
    }

    #[test]
    fn seed_outside_mask_is_an_error() {
        let mut oracle = |_, _| MaskRaster::from_fn(2, 2, |_, _| false);
        assert!(matches!(
            dense_assign(&mut oracle, 2, 2),
            Err(DenseMaskError::SeedNotInMask { x: 0, y: 0 })
        ));
        let mut oracle = |_, _| MaskRaster::from_fn(3, 2, |_, _| true);
        assert!(matches!(
            dense_assign(&mut oracle, 2, 2),
            Err(DenseMaskError::WrongSize { .. })
        ));
    }

    #[test]
    fn export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut oracle = |_, y| MaskRaster::from_fn(3, 2, |_, v| v == y);
        let a = dense_assign(&mut oracle, 3, 2).unwrap();
        a.export(dir.path()).unwrap();
        let raw = fs::read(dir.path().join(ASSIGNMENT_FILE)).unwrap();
        let ids: Vec<i32> = raw
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        assert_eq!(ids, vec![0, 0, 0, 1, 1, 1]);
        let list = fs::read_to_string(dir.path().join(MASK_LIST_FILE)).unwrap();
        assert_eq!(list.lines().count(), 4);
        assert_eq!(
            fs::read(dir.path().join("1.msk")).unwrap(),
            vec![0, 0, 0, 1, 1, 1]
        );
    }

    /// Random oracle: a box around the seed with seed-dependent extents, so
    /// masks overlap arbitrarily.
    fn box_oracle(w: usize, h: usize, salt: u64) -> impl FnMut(usize, usize) -> MaskRaster {
        move |x, y| {
            let r = (x as u64 * 31 + y as u64 * 17 + salt).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (l, rr) = ((r >> 8) as usize % 3, (r >> 16) as usize % 4);
            let (t, b) = ((r >> 24) as usize % 3, (r >> 32) as usize % 4);
            MaskRaster::from_fn(w, h, |u, v| {
                u + l >= x && u <= x + rr && v + t >= y && v <= y + b
            })
        }
    }

    proptest! {
        #[test]
        fn partition_properties(w in 1usize..12, h in 1usize..12, salt in any::<u64>()) {
            let mut calls = 0;
            let mut inner = box_oracle(w, h, salt);
            let mut oracle = |x, y| { calls += 1; inner(x, y) };
            let a = dense_assign(&mut oracle, w, h).unwrap();
            prop_assert_eq!(calls, a.masks.len());
            prop_assert!(calls <= w * h);
            let total: usize = a.masks.iter().map(|m| m.assigned).sum();
            prop_assert_eq!(total, w * h);
            for y in 0..h {
                for x in 0..w {
                    let id = a.id(x, y) as usize;
                    prop_assert!(id < a.masks.len());
                    prop_assert!(a.masks[id].mask.get(x, y));
                    // first-wins: no earlier mask contains this pixel
                    for m in &a.masks[..id] {
                        prop_assert!(!m.mask.get(x, y));
                    }
                }
            }
            let mut seeds: Vec<_> = a.masks.iter().map(|m| m.seed.1 * w + m.seed.0).collect();
            let sorted = { let mut s = seeds.clone(); s.sort_unstable(); s };
            prop_assert_eq!(&seeds, &sorted);
            seeds.dedup();
            prop_assert_eq!(seeds.len(), a.masks.len());

            let mut again = a.region_oracle();
            let b = dense_assign(&mut again, w, h).unwrap();
            prop_assert_eq!(&b.ids, &a.ids);
        }
    }
}
