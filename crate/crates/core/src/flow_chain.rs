//! Chaining sampled optical flow onto earlier track states.
//!
//! A state at source frame `j` with mean `mu_j` and std `sigma_j` is carried to
//! target frame `i` by the flow sampled at `mu_j`:
//! `mu_ji = mu_j + f_ji`, `sigma_ji² = sigma_j² + sigma_f²` (the flow Jacobian
//! is taken to be orthogonal, so the prior variance passes through unchanged).

use thiserror::Error;

use crate::config::{EngineConfig, IntervalSchedule};
use crate::dataset::{DatasetContainer, SampleError};
use crate::types::{Direction, GaussianEstimate, Point2, TrackState};

/// How far a chained mean may leave the image before it is discarded.
pub const OUT_OF_IMAGE_MARGIN_PX: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("no flow raster for {0}->{1}")]
    MissingFlow(usize, usize),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("cannot chain an invalid flow sample")]
    InvalidSample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub flow: Point2,
    pub occ_conf: f64,
    /// Clamped to `[sigma_floor, sigma_cap]`.
    pub uncertainty_sigma: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainedPrediction {
    pub source_frame: usize,
    pub estimate: GaussianEstimate,
}

/// The anchor and direction of one tracking pass.
///
/// Source frames beyond the anchor (before it for a forward pass, after it for
/// a backward pass) are never used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassWindow {
    pub direction: Direction,
    pub anchor: usize,
}

impl PassWindow {
    pub fn forward(anchor: usize) -> Self {
        Self {
            direction: Direction::Forward,
            anchor,
        }
    }

    pub fn backward(anchor: usize) -> Self {
        Self {
            direction: Direction::Backward,
            anchor,
        }
    }

    fn source(&self, target: usize, offset: usize) -> Option<usize> {
        match self.direction {
            Direction::Forward => target.checked_sub(offset).filter(|&j| j >= self.anchor),
            Direction::Backward => Some(target + offset).filter(|&j| j <= self.anchor),
        }
    }
}

fn is_visible(history: &[Option<TrackState>], frame: usize) -> bool {
    matches!(history.get(frame), Some(Some(s)) if s.visible)
}

/// Frames that feed target frame `target`, nearest first.
///
/// `history[j]` holds the state of frame `j` in this pass, or `None` when the
/// pass has not produced one. Only visible frames are returned.
pub fn source_frames(
    target: usize,
    window: PassWindow,
    schedule: &IntervalSchedule,
    history: &[Option<TrackState>],
) -> Vec<usize> {
    let mut frames: Vec<usize> = schedule
        .offsets
        .iter()
        .filter_map(|&k| window.source(target, k))
        .collect();
    if schedule.anchor && window.anchor != target {
        frames.push(window.anchor);
    }
    frames.retain(|&j| is_visible(history, j));
    frames.sort_by_key(|&j| (j.abs_diff(target), j));
    frames.dedup();
    frames
}

/// Samples the `source -> target` flow triplet at `pos`.
pub fn sample_flow(
    container: &DatasetContainer,
    source: usize,
    target: usize,
    pos: Point2,
    cfg: &EngineConfig,
) -> Result<FlowSample, FlowError> {
    let rasters = container
        .flow(source, target)
        .ok_or(FlowError::MissingFlow(source, target))?;
    let flow = rasters.flow.sample_vec2(pos)?;
    let occ_conf = rasters.occ.sample_scalar(pos)?;
    let raw_sigma = rasters.unc.sample_scalar(pos)?;
    let finite = flow.is_finite() && occ_conf.is_finite() && raw_sigma.is_finite();
    Ok(FlowSample {
        flow,
        occ_conf,
        uncertainty_sigma: cfg.clamp_sigma(raw_sigma),
        valid: finite && occ_conf > cfg.flow_validity_rho,
    })
}

/// Carries `prev` along a valid flow sample.
pub fn chain(prev: GaussianEstimate, sample: &FlowSample) -> Result<GaussianEstimate, FlowError> {
    if !sample.valid {
        return Err(FlowError::InvalidSample);
    }
    Ok(GaussianEstimate::new(
        prev.mean + sample.flow,
        prev.sigma.hypot(sample.uncertainty_sigma),
    ))
}

fn within_margin(container: &DatasetContainer, p: Point2) -> bool {
    let lo = -0.5 - OUT_OF_IMAGE_MARGIN_PX;
    p.x >= lo
        && p.y >= lo
        && p.x <= container.width as f64 - 0.5 + OUT_OF_IMAGE_MARGIN_PX
        && p.y <= container.height as f64 - 0.5 + OUT_OF_IMAGE_MARGIN_PX
}

/// All valid chained predictions for `target`, nearest source first.
///
/// Pairs with no stored raster (declared absent by the producer) contribute
/// nothing, as do invalid samples and means that leave the image by more
/// than [`OUT_OF_IMAGE_MARGIN_PX`].
pub fn chained_predictions(
    container: &DatasetContainer,
    target: usize,
    window: PassWindow,
    cfg: &EngineConfig,
    history: &[Option<TrackState>],
) -> Vec<ChainedPrediction> {
    source_frames(target, window, &cfg.intervals, history)
        .into_iter()
        .filter_map(|j| {
            let prev = history[j]?.estimate;
            let sample = sample_flow(container, j, target, prev.mean, cfg).ok()?;
            let estimate = chain(prev, &sample).ok()?;
            within_margin(container, estimate.mean).then_some(ChainedPrediction {
                source_frame: j,
                estimate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{required_flow_pairs, FlowRasters};
    use crate::types::Provenance;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn visible_history(n: usize) -> Vec<Option<TrackState>> {
        vec![Some(TrackState::anchor(Point2::ZERO)); n]
    }

    fn constant_container(
        w: usize,
        h: usize,
        t: usize,
        per_frame: Point2,
        occ: f32,
        unc: f32,
    ) -> DatasetContainer {
        let mut c = DatasetContainer::new(w, h, t);
        for (j, i) in required_flow_pairs(t, &c.schedule, [0, t - 1]) {
            let gap = i as f64 - j as f64;
            c.flows.insert(
                (j, i),
                FlowRasters::constant(w, h, per_frame * gap, occ, unc),
            );
        }
        c
    }

    #[test]
    fn forward_schedule_near_start() {
        let s = IntervalSchedule::default();
        let got = source_frames(3, PassWindow::forward(0), &s, &visible_history(80));
        assert_eq!(got, vec![2, 1, 0]);
    }

    #[test]
    fn forward_schedule_skips_occluded() {
        let s = IntervalSchedule::default();
        let mut h = visible_history(80);
        h[39] = Some(TrackState::occluded(GaussianEstimate::anchor(Point2::ZERO)));
        let got = source_frames(40, PassWindow::forward(0), &s, &h);
        assert_eq!(got, vec![38, 36, 32, 24, 8, 0]);
    }

    #[test]
    fn backward_schedule_is_mirrored() {
        let s = IntervalSchedule::default();
        let got = source_frames(77, PassWindow::backward(79), &s, &visible_history(80));
        assert_eq!(got, vec![78, 79]);
        let got = source_frames(40, PassWindow::backward(79), &s, &visible_history(80));
        assert_eq!(got, vec![41, 42, 44, 48, 56, 72, 79]);
    }

    #[test]
    fn pass_window_excludes_frames_before_the_anchor() {
        let s = IntervalSchedule::default();
        let mut h = visible_history(80);
        h[..10].iter_mut().for_each(|s| *s = None);
        let got = source_frames(13, PassWindow::forward(10), &s, &h);
        assert_eq!(got, vec![12, 11, 10]);
    }

    #[test]
    fn unprocessed_frames_are_not_sources() {
        let s = IntervalSchedule::default();
        let mut h: Vec<Option<TrackState>> = vec![None; 10];
        h[0] = Some(TrackState::anchor(Point2::ZERO));
        assert_eq!(source_frames(5, PassWindow::forward(0), &s, &h), vec![0]);
    }

    #[test]
    fn constant_field_sample() {
        let c = constant_container(8, 8, 3, Point2::new(2.0, -1.0), 1.0, 0.5);
        let cfg = EngineConfig::default();
        let s = sample_flow(&c, 1, 2, Point2::new(3.3, 6.1), &cfg).unwrap();
        assert_eq!(s.flow, Point2::new(2.0, -1.0));
        assert!(s.valid);
        assert_eq!(s.uncertainty_sigma, 0.5);
    }

    #[test]
    fn low_visibility_is_invalid() {
        let c = constant_container(4, 4, 2, Point2::ZERO, 0.05, 0.5);
        let s = sample_flow(&c, 0, 1, Point2::ZERO, &EngineConfig::default()).unwrap();
        assert!(!s.valid);
        // Exactly at the threshold is still invalid.
        let c = constant_container(4, 4, 2, Point2::ZERO, 0.1, 0.5);
        let cfg = EngineConfig {
            flow_validity_rho: f64::from(0.1f32),
            ..Default::default()
        };
        assert!(!sample_flow(&c, 0, 1, Point2::ZERO, &cfg).unwrap().valid);
    }

    #[test]
    fn zero_uncertainty_is_floored() {
        let c = constant_container(4, 4, 2, Point2::ZERO, 1.0, 0.0);
        let s = sample_flow(&c, 0, 1, Point2::ZERO, &EngineConfig::default()).unwrap();
        assert_eq!(s.uncertainty_sigma, 1e-3);
    }

    #[test]
    fn missing_pair_is_an_error() {
        let c = DatasetContainer::new(4, 4, 2);
        let err = sample_flow(&c, 0, 1, Point2::ZERO, &EngineConfig::default()).unwrap_err();
        assert_eq!(err, FlowError::MissingFlow(0, 1));
    }

    fn sample(flow: Point2, sigma: f64) -> FlowSample {
        FlowSample {
            flow,
            occ_conf: 1.0,
            uncertainty_sigma: sigma,
            valid: true,
        }
    }

    #[test]
    fn chain_from_anchor() {
        let g = chain(
            GaussianEstimate::anchor(Point2::new(10.0, 10.0)),
            &sample(Point2::new(2.0, -1.0), 1.0),
        )
        .unwrap();
        assert_eq!(g.mean, Point2::new(12.0, 9.0));
        assert_eq!(g.sigma, 1.0);
    }

    #[test]
    fn chain_pythagorean() {
        let g = chain(
            GaussianEstimate::new(Point2::ZERO, 3.0),
            &sample(Point2::ZERO, 4.0),
        )
        .unwrap();
        assert_eq!(g.sigma, 5.0);
    }

    #[test]
    fn two_hops_match_closed_form() {
        let s = sample(Point2::new(1.0, 0.0), 1.0);
        let once = chain(GaussianEstimate::new(Point2::ZERO, 1.0), &s).unwrap();
        let twice = chain(once, &s).unwrap();
        // Closed form: sqrt(1 + 1 + 1).
        assert_relative_eq!(twice.sigma, 3f64.sqrt(), max_relative = 1e-15);
        assert_eq!(twice.mean, Point2::new(2.0, 0.0));
    }

    #[test]
    fn chain_rejects_invalid_sample() {
        let mut s = sample(Point2::ZERO, 1.0);
        s.valid = false;
        assert_eq!(
            chain(GaussianEstimate::anchor(Point2::ZERO), &s),
            Err(FlowError::InvalidSample)
        );
    }

    #[test]
    fn identity_motion_predictions() {
        let c = constant_container(12, 12, 6, Point2::ZERO, 1.0, 0.5);
        let cfg = EngineConfig::default();
        let mut h: Vec<Option<TrackState>> = vec![None; 6];
        for state in h.iter_mut().take(5) {
            *state = Some(TrackState::anchor(Point2::new(5.0, 5.0)));
        }
        let preds = chained_predictions(&c, 5, PassWindow::forward(0), &cfg, &h);
        assert_eq!(preds.len(), 4);
        assert!(preds
            .iter()
            .all(|p| p.estimate.mean == Point2::new(5.0, 5.0)));
    }

    #[test]
    fn all_invalid_gives_nothing() {
        let c = constant_container(12, 12, 6, Point2::ZERO, 0.05, 0.5);
        let h = visible_history(6);
        let preds =
            chained_predictions(&c, 5, PassWindow::forward(0), &EngineConfig::default(), &h);
        assert!(preds.is_empty());
    }

    #[test]
    fn linear_motion_predictions() {
        let unit = Point2::new(1.0, 0.0);
        let c = constant_container(40, 4, 12, unit, 1.0, 0.25);
        let cfg = EngineConfig::default();
        // Analytic trajectory x = 2 + t.
        let h: Vec<Option<TrackState>> = (0..12)
            .map(|t| {
                Some(TrackState::visible(
                    GaussianEstimate::new(Point2::new(2.0 + t as f64, 1.0), 0.5),
                    Provenance::Forward,
                ))
            })
            .collect();
        let preds = chained_predictions(&c, 11, PassWindow::forward(0), &cfg, &h);
        let sources: Vec<usize> = preds.iter().map(|p| p.source_frame).collect();
        assert_eq!(sources, vec![10, 9, 7, 3, 0]);
        for p in &preds {
            let expected =
                h[p.source_frame].unwrap().estimate.mean + unit * (11 - p.source_frame) as f64;
            assert_eq!(p.estimate.mean, expected);
            assert_eq!(p.estimate.mean, Point2::new(13.0, 1.0));
        }
    }

    #[test]
    fn predictions_leaving_the_image_are_dropped() {
        let c = constant_container(6, 6, 2, Point2::new(3.0, 0.0), 1.0, 0.5);
        let cfg = EngineConfig::default();
        let mut h = vec![None; 2];
        h[0] = Some(TrackState::anchor(Point2::new(4.0, 2.0)));
        assert!(chained_predictions(&c, 1, PassWindow::forward(0), &cfg, &h).is_empty());
        h[0] = Some(TrackState::anchor(Point2::new(3.4, 2.0)));
        assert_eq!(
            chained_predictions(&c, 1, PassWindow::forward(0), &cfg, &h).len(),
            1
        );
    }

    proptest! {
        #[test]
        fn chaining_never_shrinks_sigma(prev in 0.0f64..100.0, f in 1e-3f64..100.0) {
            let g = chain(GaussianEstimate::new(Point2::ZERO, prev), &sample(Point2::ZERO, f)).unwrap();
            prop_assert!(g.sigma >= prev && g.sigma >= f);
        }

        #[test]
        fn translation_equivariance(
            fx in -3.0f64..3.0, fy in -3.0f64..3.0,
            sx in -2i32..3, sy in -2i32..3,
        ) {
            let flow = Point2::new(fx, fy);
            let shift = Point2::new(f64::from(sx), f64::from(sy));
            let c = constant_container(32, 32, 4, flow, 1.0, 0.5);
            let cfg = EngineConfig::default();
            let at = |p: Point2| {
                let mut h = vec![None; 4];
                for s in h.iter_mut().take(3) {
                    *s = Some(TrackState::anchor(p));
                }
                chained_predictions(&c, 3, PassWindow::forward(0), &cfg, &h)
            };
            let base = at(Point2::new(15.0, 15.0));
            let moved = at(Point2::new(15.0, 15.0) + shift);
            prop_assert_eq!(base.len(), moved.len());
            for (a, b) in base.iter().zip(&moved) {
                prop_assert_eq!(a.estimate.mean + shift, b.estimate.mean);
            }
        }

        #[test]
        fn backward_mirrors_forward(t in 2usize..90, target_frac in 0.0f64..1.0) {
            let s = IntervalSchedule::default();
            let target = ((t - 1) as f64 * target_frac) as usize;
            let h = visible_history(t);
            let fwd = source_frames(target, PassWindow::forward(0), &s, &h);
            let mirrored = t - 1 - target;
            let bwd = source_frames(mirrored, PassWindow::backward(t - 1), &s, &h);
            let reflected: Vec<usize> = bwd.iter().map(|&j| t - 1 - j).collect();
            prop_assert_eq!(fwd, reflected);
        }
    }
}
