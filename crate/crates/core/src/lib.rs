//! Probabilistic point tracking over precomputed flow, mask, feature and
//! keypoint rasters.
//!
//! Flow predictions from several earlier frames are chained as isotropic
//! Gaussians, screened by an object mask and a feature-similarity test, merged
//! with a correlation-corrected inverse-variance rule and finally fused with
//! long-term keypoint observations. A forward and a backward pass are combined
//! so that frames lost going forward can be recovered from the future.

pub mod config;
pub mod dataset;
pub mod dense_mask;
pub mod filter;
pub mod flow_chain;
pub mod fusion;
pub mod metrics;
pub mod synth;
pub mod tracker;
pub mod types;

pub use config::{ConfigError, EngineConfig, IntervalSchedule};
pub use dataset::{DatasetContainer, DatasetError};
pub use types::{
    Direction, GaussianEstimate, ObjectId, Point2, Provenance, QueryPoint, TrackState,
};
