//! Merging chained predictions and fusing them with keypoint observations.

use thiserror::Error;

use crate::config::EngineConfig;
use crate::flow_chain::ChainedPrediction;
use crate::types::{GaussianEstimate, Point2, Provenance};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("cannot merge an empty prediction set")]
    Empty,
    #[error("prediction from frame {0} has non-positive sigma")]
    NonPositiveSigma(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    /// `None` exactly when `contributors` is empty.
    pub estimate: Option<GaussianEstimate>,
    pub contributors: Vec<usize>,
    pub dropped_outliers: Vec<usize>,
}

/// Index of the most trustworthy prediction: smallest sigma, then nearest
/// source frame, then lowest source index.
fn most_trusted(preds: &[ChainedPrediction], target: usize) -> Option<usize> {
    (0..preds.len()).min_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pa.estimate
            .sigma
            .total_cmp(&pb.estimate.sigma)
            .then(
                pa.source_frame
                    .abs_diff(target)
                    .cmp(&pb.source_frame.abs_diff(target)),
            )
            .then(pa.source_frame.cmp(&pb.source_frame))
    })
}

/// Splits `preds` into those strictly within `outlier_dist_px` of the most
/// trusted prediction (which is always kept) and the rest. Input order is
/// preserved in both halves.
pub fn remove_outliers(
    preds: &[ChainedPrediction],
    target: usize,
    cfg: &EngineConfig,
) -> (Vec<ChainedPrediction>, Vec<ChainedPrediction>) {
    let Some(best) = most_trusted(preds, target) else {
        return (Vec::new(), Vec::new());
    };
    let center = preds[best].estimate.mean;
    preds.iter().enumerate().fold(
        (Vec::new(), Vec::new()),
        |(mut kept, mut dropped), (idx, p)| {
            if idx == best || p.estimate.mean.distance(&center) < cfg.outlier_dist_px {
                kept.push(*p);
            } else {
                dropped.push(*p);
            }
            (kept, dropped)
        },
    )
}

/// Inverse-variance merge with the constant-correlation correction.
///
/// The mean is the precision-weighted average; the variance `1 / Σ 1/σ²` is
/// inflated by `(N - 1)·p + 1` to account for correlated inputs.
pub fn merge(
    preds: &[ChainedPrediction],
    cfg: &EngineConfig,
) -> Result<GaussianEstimate, FusionError> {
    if preds.is_empty() {
        return Err(FusionError::Empty);
    }
    let mut precision = 0.0;
    let mut weighted = Point2::ZERO;
    for p in preds {
        let s = p.estimate.sigma;
        if s.is_nan() || s <= 0.0 {
            return Err(FusionError::NonPositiveSigma(p.source_frame));
        }
        let w = 1.0 / (s * s);
        precision += w;
        weighted = weighted + p.estimate.mean * w;
    }
    let n = preds.len() as f64;
    let inflation = (n - 1.0) * cfg.correlation_p + 1.0;
    Ok(GaussianEstimate::new(
        weighted * (1.0 / precision),
        (inflation / precision).sqrt(),
    ))
}

/// Outlier removal followed by [`merge`].
pub fn merge_predictions(
    preds: &[ChainedPrediction],
    target: usize,
    cfg: &EngineConfig,
) -> Result<MergeResult, FusionError> {
    let (kept, dropped) = remove_outliers(preds, target, cfg);
    let estimate = if kept.is_empty() {
        None
    } else {
        Some(merge(&kept, cfg)?)
    };
    Ok(MergeResult {
        estimate,
        contributors: kept.iter().map(|p| p.source_frame).collect(),
        dropped_outliers: dropped.iter().map(|p| p.source_frame).collect(),
    })
}

/// Joint update of the flow estimate with an accepted keypoint.
///
/// `pass` is the provenance reported when only flow is available.
pub fn fuse_with_keypoint(
    flow: Option<GaussianEstimate>,
    keypoint: Option<Point2>,
    pass: Provenance,
    cfg: &EngineConfig,
) -> (Option<GaussianEstimate>, Provenance) {
    match (flow, keypoint) {
        (None, None) => (None, Provenance::Occluded),
        (Some(f), None) => (Some(f), pass),
        (None, Some(k)) => (
            Some(GaussianEstimate::new(k, cfg.keypoint_sigma)),
            Provenance::KeypointOnly,
        ),
        (Some(f), Some(k)) => {
            let wf = 1.0 / f.variance();
            let wk = 1.0 / (cfg.keypoint_sigma * cfg.keypoint_sigma);
            let precision = wf + wk;
            let mean = (f.mean * wf + k * wk) * (1.0 / precision);
            (
                Some(GaussianEstimate::new(mean, (1.0 / precision).sqrt())),
                pass,
            )
        }
    }
}
