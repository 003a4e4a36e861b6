//! Object-mask and feature-similarity screening of candidate positions.
//!
//! Checks run in a fixed order (keypoint confidence, then mask, then feature
//! similarity) so the reported reason is deterministic; acceptance is the
//! conjunction of all of them.

use thiserror::Error;

use crate::config::EngineConfig;
use crate::dataset::{DatasetContainer, Keypoint};
use crate::flow_chain::ChainedPrediction;
use crate::types::{ObjectId, Point2};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("missing mask for object {object}, frame {frame}")]
    MissingMask { object: ObjectId, frame: usize },
    #[error("no feature raster for frame {0}")]
    MissingFeatures(usize),
    #[error("no feature vector for query {0}")]
    MissingQueryFeature(usize),
    #[error("unknown query {0}")]
    UnknownQuery(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterReason {
    Ok,
    OutsideMask,
    LowFeatureSimilarity,
    OutOfBounds,
    LowConfidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub reason: FilterReason,
}

impl FilterVerdict {
    pub const OK: FilterVerdict = FilterVerdict {
        accepted: true,
        reason: FilterReason::Ok,
    };

    pub fn reject(reason: FilterReason) -> Self {
        debug_assert!(reason != FilterReason::Ok);
        Self {
            accepted: false,
            reason,
        }
    }
}

/// Accepts `pos` only if the object's mask in `frame` covers it.
pub fn mask_filter(
    container: &DatasetContainer,
    object: ObjectId,
    frame: usize,
    pos: Point2,
) -> Result<FilterVerdict, FilterError> {
    let mask = container
        .mask(object, frame)
        .ok_or(FilterError::MissingMask { object, frame })?;
    Ok(match mask.nearest_texel(pos) {
        None => FilterVerdict::reject(FilterReason::OutOfBounds),
        Some((x, y)) if mask.get(x, y) => FilterVerdict::OK,
        Some(_) => FilterVerdict::reject(FilterReason::OutsideMask),
    })
}

/// Cosine similarity between the frame's feature at `pos` and the query's
/// reference feature.
///
/// `pos` is in image pixels and is mapped onto the (possibly coarser) feature
/// grid with pixel centers aligned. A sampled feature of zero norm scores -1.
pub fn feature_similarity(
    container: &DatasetContainer,
    query: usize,
    frame: usize,
    pos: Point2,
) -> Result<f64, FilterError> {
    let features = container
        .features
        .as_ref()
        .ok_or(FilterError::MissingFeatures(frame))?;
    let raster = features
        .frames
        .get(frame)
        .ok_or(FilterError::MissingFeatures(frame))?;
    let reference = features
        .queries
        .get(query)
        .ok_or(FilterError::MissingQueryFeature(query))?;
    let sx = features.width as f64 / container.width as f64;
    let sy = features.height as f64 / container.height as f64;
    let fpos = Point2::new((pos.x + 0.5) * sx - 0.5, (pos.y + 0.5) * sy - 0.5);
    let mut sampled = vec![0.0; features.channels];
    if raster.sample_into(fpos, &mut sampled).is_err() {
        return Ok(-1.0);
    }
    let (mut dot, mut ns, mut nr) = (0.0, 0.0, 0.0);
    for (&s, &r) in sampled.iter().zip(reference) {
        let r = f64::from(r);
        dot += s * r;
        ns += s * s;
        nr += r * r;
    }
    if ns <= 0.0 || nr <= 0.0 {
        return Ok(-1.0);
    }
    Ok((dot / (ns.sqrt() * nr.sqrt())).clamp(-1.0, 1.0))
}

fn object_of(container: &DatasetContainer, query: usize) -> Result<ObjectId, FilterError> {
    container
        .queries
        .get(query)
        .map(|q| q.object_id)
        .ok_or(FilterError::UnknownQuery(query))
}

/// Mask check, then similarity against `threshold` when the container has
/// features.
fn mask_then_feature(
    container: &DatasetContainer,
    query: usize,
    frame: usize,
    pos: Point2,
    threshold: f64,
) -> Result<FilterVerdict, FilterError> {
    let verdict = mask_filter(container, object_of(container, query)?, frame, pos)?;
    if !verdict.accepted {
        return Ok(verdict);
    }
    if container.features.is_some() && feature_similarity(container, query, frame, pos)? < threshold
    {
        return Ok(FilterVerdict::reject(FilterReason::LowFeatureSimilarity));
    }
    Ok(FilterVerdict::OK)
}

/// Screens a chained flow prediction for `frame`.
pub fn filter_flow_prediction(
    container: &DatasetContainer,
    query: usize,
    frame: usize,
    pred: &ChainedPrediction,
    cfg: &EngineConfig,
) -> Result<FilterVerdict, FilterError> {
    mask_then_feature(
        container,
        query,
        frame,
        pred.estimate.mean,
        cfg.geo_sim_flow,
    )
}

/// Screens a keypoint candidate: confidence must strictly exceed
/// `keypoint_confidence_rho`, then the mask and feature checks apply.
pub fn filter_keypoint(
    container: &DatasetContainer,
    query: usize,
    frame: usize,
    kp: &Keypoint,
    cfg: &EngineConfig,
) -> Result<FilterVerdict, FilterError> {
    if f64::from(kp.confidence) <= cfg.keypoint_confidence_rho {
        return Ok(FilterVerdict::reject(FilterReason::LowConfidence));
    }
    mask_then_feature(container, query, frame, kp.position(), cfg.geo_sim_keypoint)
}
