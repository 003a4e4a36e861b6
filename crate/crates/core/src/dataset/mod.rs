//! On-disk container of per-frame rasters and per-query data.
//!
//! Layout of a container directory:
//!
//! ```text
//! manifest.json
//! flow/<j>_<i>.{flo2,occ,unc}      f32 LE, row-major; flo2 interleaves (dx, dy)
//! masks/<object_id>/<t>.msk        u8, 0 or 1
//! feat/<t>.ftr                     f32 LE, Hf x Wf x C interleaved
//! feat/query_<q>.vec               f32 LE, C values
//! keypoints/<q>.kpt                16-byte records: u32 frame, f32 x, f32 y, f32 confidence
//! queries.tsv
//! gt.tsv                           optional
//! ```

mod container;
mod raster;

pub(crate) use container::{parse_field, read_tsv};
pub use container::{
    read_ground_truth, required_flow_pairs, DatasetContainer, DatasetError, FeatureSet,
    FlowRasters, GroundTruth, GtPoint, Keypoint, Manifest, MANIFEST_FILE,
};
pub use raster::{MaskRaster, Raster, RasterKind, SampleError};
