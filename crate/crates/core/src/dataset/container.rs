use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::raster::{MaskRaster, Raster, RasterKind};
use crate::config::IntervalSchedule;
use crate::types::{ObjectId, Point2, QueryPoint};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_NAME: &str = "probtrack-container";
const FORMAT_VERSION: u32 = 1;
const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing manifest: {}", .0.display())]
    MissingManifest(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("mask not binary (object {object}, frame {frame})")]
    MaskNotBinary { object: ObjectId, frame: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("feature vector not unit norm in {0}")]
    NotUnitNorm(String),
    #[error("missing flow raster {0}->{1} required by the interval schedule")]
    MissingFlow(usize, usize),
    #[error("missing mask for object {object}, frame {frame}")]
    MissingMask { object: ObjectId, frame: usize },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid container: {0}")]
    Invalid(String),
}

impl DatasetError {
    pub fn is_io(&self) -> bool {
        matches!(self, DatasetError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The flow, visibility-confidence and uncertainty maps for one ordered
/// frame pair `j -> i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRasters {
    pub flow: Raster,
    /// Visibility confidence, higher means more likely visible.
    pub occ: Raster,
    /// Flow standard deviation in pixels.
    pub unc: Raster,
}

impl FlowRasters {
    /// Spatially constant maps.
    pub fn constant(width: usize, height: usize, flow: Point2, occ: f32, unc: f32) -> Self {
        Self {
            flow: Raster::filled(
                RasterKind::Flow2,
                width,
                height,
                &[flow.x as f32, flow.y as f32],
            )
            .expect("non-empty dims"),
            occ: Raster::filled(RasterKind::Scalar, width, height, &[occ]).expect("non-empty dims"),
            unc: Raster::filled(RasterKind::Scalar, width, height, &[unc]).expect("non-empty dims"),
        }
    }
}

/// Per-frame feature rasters plus one reference vector per query.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: Vec<Raster>,
    pub queries: Vec<Vec<f32>>,
}

/// Long-term correspondence candidate for one query in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub confidence: f32,
}

impl Keypoint {
    pub fn position(&self) -> Point2 {
        Point2::new(f64::from(self.x), f64::from(self.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPoint {
    pub position: Point2,
    pub visible: bool,
}

/// Ground truth indexed `[query][frame]`.
pub type GroundTruth = Vec<Vec<GtPoint>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub intervals: String,
    pub feature_channels: usize,
    pub feature_width: usize,
    pub feature_height: usize,
    pub flow_pairs: Vec<[usize; 2]>,
    #[serde(default)]
    pub absent_flow_pairs: Vec<[usize; 2]>,
    pub objects: Vec<ObjectId>,
    pub num_queries: usize,
    pub has_ground_truth: bool,
    #[serde(default)]
    pub incomplete: bool,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

/// Everything the engine consumes for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    /// Schedule the flow pairs were produced for.
    pub schedule: IntervalSchedule,
    pub flows: BTreeMap<(usize, usize), FlowRasters>,
    /// Pairs the producer could not compute; treated as invalid flow.
    pub absent_flows: BTreeSet<(usize, usize)>,
    /// Per object, one mask per frame.
    pub masks: BTreeMap<ObjectId, Vec<MaskRaster>>,
    pub features: Option<FeatureSet>,
    pub queries: Vec<QueryPoint>,
    /// Indexed `[query][frame]`.
    pub keypoints: Vec<Vec<Option<Keypoint>>>,
    pub ground_truth: Option<GroundTruth>,
    pub incomplete: bool,
    pub notes: BTreeMap<String, String>,
}

/// Every ordered pair `(source, target)` a schedule can ask for, in both
/// directions, including anchor pairs for each frame in `anchors`.
pub fn required_flow_pairs(
    num_frames: usize,
    schedule: &IntervalSchedule,
    anchors: impl IntoIterator<Item = usize>,
) -> BTreeSet<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    for i in 0..num_frames {
        for &k in &schedule.offsets {
            if i >= k {
                pairs.insert((i - k, i));
            }
            if i + k < num_frames {
                pairs.insert((i + k, i));
            }
        }
    }
    if schedule.anchor {
        for a in anchors {
            if a >= num_frames {
                continue;
            }
            pairs.extend((0..num_frames).filter(|&i| i != a).map(|i| (a, i)));
        }
    }
    pairs
}

impl DatasetContainer {
    /// Empty container with no flows, masks, features or queries.
    pub fn new(width: usize, height: usize, num_frames: usize) -> Self {
        Self {
            width,
            height,
            num_frames,
            schedule: IntervalSchedule::default(),
            flows: BTreeMap::new(),
            absent_flows: BTreeSet::new(),
            masks: BTreeMap::new(),
            features: None,
            queries: Vec::new(),
            keypoints: Vec::new(),
            ground_truth: None,
            incomplete: false,
            notes: BTreeMap::new(),
        }
    }

    pub fn flow(&self, source: usize, target: usize) -> Option<&FlowRasters> {
        self.flows.get(&(source, target))
    }

    pub fn mask(&self, object: ObjectId, frame: usize) -> Option<&MaskRaster> {
        self.masks.get(&object).and_then(|m| m.get(frame))
    }

    pub fn keypoint(&self, query: usize, frame: usize) -> Option<Keypoint> {
        self.keypoints
            .get(query)
            .and_then(|k| k.get(frame))
            .copied()
            .flatten()
    }

    /// Whether `pos` lies on the image, using the continuous extent
    /// `[-0.5, W - 0.5] x [-0.5, H - 0.5]`.
    pub fn contains(&self, pos: Point2) -> bool {
        pos.is_finite()
            && pos.x >= -0.5
            && pos.y >= -0.5
            && pos.x <= self.width as f64 - 0.5
            && pos.y <= self.height as f64 - 0.5
    }

    /// Anchor frames whose flow pairs must be present: first, last and every
    /// query frame.
    pub fn anchor_frames(&self) -> BTreeSet<usize> {
        let mut a: BTreeSet<usize> = self.queries.iter().map(|q| q.query_frame).collect();
        if self.num_frames > 0 {
            a.insert(0);
            a.insert(self.num_frames - 1);
        }
        a
    }

    /// Fails with the first pair `schedule` needs that is neither stored nor
    /// declared absent.
    pub fn check_schedule(&self, schedule: &IntervalSchedule) -> Result<(), DatasetError> {
        for (j, i) in required_flow_pairs(self.num_frames, schedule, self.anchor_frames()) {
            if !self.flows.contains_key(&(j, i)) && !self.absent_flows.contains(&(j, i)) {
                return Err(DatasetError::MissingFlow(j, i));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return Err(DatasetError::Invalid("empty dimensions".into()));
        }
        let t = self.num_frames;
        for (&(j, i), f) in &self.flows {
            if j >= t || i >= t || j == i {
                return Err(DatasetError::Invalid(format!("bad flow pair {j}->{i}")));
            }
            let name = format!("flow {j}->{i}");
            for (r, kind) in [
                (&f.flow, RasterKind::Flow2),
                (&f.occ, RasterKind::Scalar),
                (&f.unc, RasterKind::Scalar),
            ] {
                check_dims(&name, r, kind, self.width, self.height)?;
                check_finite(&name, r.data())?;
            }
        }
        for &(j, i) in &self.absent_flows {
            if self.flows.contains_key(&(j, i)) {
                return Err(DatasetError::Invalid(format!(
                    "flow {j}->{i} both present and marked absent"
                )));
            }
        }
        self.check_schedule(&self.schedule)?;

        for (&object, frames) in &self.masks {
            if frames.len() != t {
                let frame = frames.len().min(t);
                return Err(DatasetError::MissingMask { object, frame });
            }
            for (frame, m) in frames.iter().enumerate() {
                if m.width() != self.width || m.height() != self.height {
                    return Err(DatasetError::DimensionMismatch {
                        what: format!("mask {object}/{frame}"),
                        expected: self.width * self.height,
                        found: m.width() * m.height(),
                    });
                }
                if !m.is_binary() {
                    return Err(DatasetError::MaskNotBinary { object, frame });
                }
            }
        }

        if let Some(fs) = &self.features {
            if fs.frames.len() != t {
                return Err(DatasetError::DimensionMismatch {
                    what: "feature frames".into(),
                    expected: t,
                    found: fs.frames.len(),
                });
            }
            for (frame, r) in fs.frames.iter().enumerate() {
                let name = format!("feature frame {frame}");
                if r.kind() != RasterKind::Feature
                    || r.width() != fs.width
                    || r.height() != fs.height
                    || r.channels() != fs.channels
                {
                    return Err(DatasetError::DimensionMismatch {
                        what: name,
                        expected: fs.width * fs.height * fs.channels,
                        found: r.data().len(),
                    });
                }
                check_finite(&name, r.data())?;
                for texel in r.data().chunks_exact(fs.channels) {
                    check_unit(&name, texel)?;
                }
            }
            if fs.queries.len() != self.queries.len() {
                return Err(DatasetError::DimensionMismatch {
                    what: "query feature vectors".into(),
                    expected: self.queries.len(),
                    found: fs.queries.len(),
                });
            }
            for (q, v) in fs.queries.iter().enumerate() {
                let name = format!("query feature {q}");
                if v.len() != fs.channels {
                    return Err(DatasetError::DimensionMismatch {
                        what: name,
                        expected: fs.channels,
                        found: v.len(),
                    });
                }
                check_finite(&name, v)?;
                check_unit(&name, v)?;
            }
        }

        for (q, query) in self.queries.iter().enumerate() {
            if query.query_frame >= t {
                return Err(DatasetError::Invalid(format!(
                    "query {q} frame {} out of range",
                    query.query_frame
                )));
            }
            if !self.contains(query.position) {
                return Err(DatasetError::Invalid(format!(
                    "query {q} position outside the image"
                )));
            }
            if !self.masks.contains_key(&query.object_id) {
                return Err(DatasetError::MissingMask {
                    object: query.object_id,
                    frame: query.query_frame,
                });
            }
        }

        if self.keypoints.len() != self.queries.len() {
            return Err(DatasetError::DimensionMismatch {
                what: "keypoint tracks".into(),
                expected: self.queries.len(),
                found: self.keypoints.len(),
            });
        }
        for (q, track) in self.keypoints.iter().enumerate() {
            if track.len() != t {
                return Err(DatasetError::DimensionMismatch {
                    what: format!("keypoints of query {q}"),
                    expected: t,
                    found: track.len(),
                });
            }
            for kp in track.iter().flatten() {
                if !(kp.x.is_finite() && kp.y.is_finite() && kp.confidence.is_finite()) {
                    return Err(DatasetError::NonFinite(format!("keypoints of query {q}")));
                }
            }
        }

        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.queries.len() {
                return Err(DatasetError::DimensionMismatch {
                    what: "ground truth tracks".into(),
                    expected: self.queries.len(),
                    found: gt.len(),
                });
            }
            for (q, track) in gt.iter().enumerate() {
                if track.len() != t {
                    return Err(DatasetError::DimensionMismatch {
                        what: format!("ground truth of query {q}"),
                        expected: t,
                        found: track.len(),
                    });
                }
                if track.iter().any(|p| !p.position.is_finite()) {
                    return Err(DatasetError::NonFinite(format!(
                        "ground truth of query {q}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let (fc, fw, fh) = self
            .features
            .as_ref()
            .map(|f| (f.channels, f.width, f.height))
            .unwrap_or((0, 0, 0));
        Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            width: self.width,
            height: self.height,
            num_frames: self.num_frames,
            intervals: self.schedule.to_string(),
            feature_channels: fc,
            feature_width: fw,
            feature_height: fh,
            flow_pairs: self.flows.keys().map(|&(j, i)| [j, i]).collect(),
            absent_flow_pairs: self.absent_flows.iter().map(|&(j, i)| [j, i]).collect(),
            objects: self.masks.keys().copied().collect(),
            num_queries: self.queries.len(),
            has_ground_truth: self.ground_truth.is_some(),
            incomplete: self.incomplete,
            notes: self.notes.clone(),
        }
    }

    /// Writes the container directory. Refuses containers that fail
    /// validation before touching the filesystem.
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        for sub in ["flow", "masks", "feat", "keypoints"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        for (&(j, i), f) in &self.flows {
            let stem = dir.join("flow").join(format!("{j}_{i}"));
            write_f32(&stem.with_extension("flo2"), f.flow.data())?;
            write_f32(&stem.with_extension("occ"), f.occ.data())?;
            write_f32(&stem.with_extension("unc"), f.unc.data())?;
        }
        for (object, frames) in &self.masks {
            let d = dir.join("masks").join(object.to_string());
            fs::create_dir_all(&d).map_err(io_err(&d))?;
            for (t, m) in frames.iter().enumerate() {
                let p = d.join(format!("{t}.msk"));
                fs::write(&p, m.data()).map_err(io_err(&p))?;
            }
        }
        if let Some(fs_) = &self.features {
            for (t, r) in fs_.frames.iter().enumerate() {
                write_f32(&dir.join("feat").join(format!("{t}.ftr")), r.data())?;
            }
            for (q, v) in fs_.queries.iter().enumerate() {
                write_f32(&dir.join("feat").join(format!("query_{q}.vec")), v)?;
            }
        }
        for (q, track) in self.keypoints.iter().enumerate() {
            let mut bytes = Vec::new();
            for (t, kp) in track.iter().enumerate() {
                if let Some(kp) = kp {
                    bytes.extend_from_slice(&(t as u32).to_le_bytes());
                    bytes.extend_from_slice(&kp.x.to_le_bytes());
                    bytes.extend_from_slice(&kp.y.to_le_bytes());
                    bytes.extend_from_slice(&kp.confidence.to_le_bytes());
                }
            }
            let p = dir.join("keypoints").join(format!("{q}.kpt"));
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }

        let mut queries = String::from("query_id\tframe\tx\ty\tobject_id\n");
        for (q, p) in self.queries.iter().enumerate() {
            let _ = writeln!(
                queries,
                "{q}\t{}\t{}\t{}\t{}",
                p.query_frame, p.position.x, p.position.y, p.object_id
            );
        }
        let p = dir.join("queries.tsv");
        fs::write(&p, queries).map_err(io_err(&p))?;

        let gt_path = dir.join("gt.tsv");
        if let Some(gt) = &self.ground_truth {
            let mut s = String::from("query_id\tframe\tx\ty\tvisible\n");
            for (q, track) in gt.iter().enumerate() {
                for (t, g) in track.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{q}\t{t}\t{}\t{}\t{}",
                        g.position.x,
                        g.position.y,
                        u8::from(g.visible)
                    );
                }
            }
            fs::write(&gt_path, s).map_err(io_err(&gt_path))?;
        } else if gt_path.exists() {
            fs::remove_file(&gt_path).map_err(io_err(&gt_path))?;
        }

        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| DatasetError::Manifest(e.to_string()))?;
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, manifest + "\n").map_err(io_err(&p))?;
        Ok(())
    }

    /// Reads and fully validates a container directory.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.is_file() {
            return Err(DatasetError::MissingManifest(mpath));
        }
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let m: Manifest =
            serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
                .map_err(|e| {
                    DatasetError::Manifest(format!("field '{}': {}", e.path(), e.inner()))
                })?;
        if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
            return Err(DatasetError::Manifest(format!(
                "unsupported format '{}' version {}",
                m.format, m.version
            )));
        }
        if m.width == 0 || m.height == 0 || m.num_frames == 0 {
            return Err(DatasetError::Manifest(
                "width, height and num_frames must be positive".into(),
            ));
        }
        let schedule: IntervalSchedule = m
            .intervals
            .parse()
            .map_err(|e| DatasetError::Manifest(format!("intervals: {e}")))?;
        let (w, h, t) = (m.width, m.height, m.num_frames);

        let mut c = DatasetContainer::new(w, h, t);
        c.schedule = schedule;
        c.incomplete = m.incomplete;
        c.notes = m.notes.clone();
        c.absent_flows = m.absent_flow_pairs.iter().map(|p| (p[0], p[1])).collect();

        for &[j, i] in &m.flow_pairs {
            let stem = dir.join("flow").join(format!("{j}_{i}"));
            let flow = read_raster(&stem.with_extension("flo2"), RasterKind::Flow2, w, h, 2)?;
            let occ = read_raster(&stem.with_extension("occ"), RasterKind::Scalar, w, h, 1)?;
            let unc = read_raster(&stem.with_extension("unc"), RasterKind::Scalar, w, h, 1)?;
            c.flows.insert((j, i), FlowRasters { flow, occ, unc });
        }

        for &object in &m.objects {
            let d = dir.join("masks").join(object.to_string());
            let mut frames = Vec::with_capacity(t);
            for frame in 0..t {
                let p = d.join(format!("{frame}.msk"));
                if !p.is_file() {
                    return Err(DatasetError::MissingMask { object, frame });
                }
                let bytes = fs::read(&p).map_err(io_err(&p))?;
                let found = bytes.len();
                let mask = MaskRaster::new(w, h, bytes).ok_or(DatasetError::DimensionMismatch {
                    what: p.display().to_string(),
                    expected: w * h,
                    found,
                })?;
                frames.push(mask);
            }
            c.masks.insert(object, frames);
        }

        let queries = read_queries(&dir.join("queries.tsv"))?;
        if queries.len() != m.num_queries {
            return Err(DatasetError::DimensionMismatch {
                what: "queries.tsv".into(),
                expected: m.num_queries,
                found: queries.len(),
            });
        }
        c.queries = queries;

        if m.feature_channels > 0 {
            let (fw, fh, fc) = (m.feature_width, m.feature_height, m.feature_channels);
            let mut frames = Vec::with_capacity(t);
            for frame in 0..t {
                let p = dir.join("feat").join(format!("{frame}.ftr"));
                frames.push(read_raster(&p, RasterKind::Feature, fw, fh, fc)?);
            }
            let mut qv = Vec::with_capacity(c.queries.len());
            for q in 0..c.queries.len() {
                let p = dir.join("feat").join(format!("query_{q}.vec"));
                let v = read_f32(&p)?;
                if v.len() != fc {
                    return Err(DatasetError::DimensionMismatch {
                        what: p.display().to_string(),
                        expected: fc,
                        found: v.len(),
                    });
                }
                qv.push(v);
            }
            c.features = Some(FeatureSet {
                width: fw,
                height: fh,
                channels: fc,
                frames,
                queries: qv,
            });
        }

        c.keypoints = (0..c.queries.len())
            .map(|q| read_keypoints(&dir.join("keypoints").join(format!("{q}.kpt")), t))
            .collect::<Result<_, _>>()?;

        if m.has_ground_truth {
            c.ground_truth = Some(read_ground_truth(&dir.join("gt.tsv"), c.queries.len(), t)?);
        }

        c.validate()?;
        Ok(c)
    }
}

fn check_dims(
    name: &str,
    r: &Raster,
    kind: RasterKind,
    width: usize,
    height: usize,
) -> Result<(), DatasetError> {
    if r.kind() != kind || r.width() != width || r.height() != height {
        return Err(DatasetError::DimensionMismatch {
            what: name.to_string(),
            expected: width * height * r.channels(),
            found: r.data().len(),
        });
    }
    Ok(())
}

fn check_finite(name: &str, data: &[f32]) -> Result<(), DatasetError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DatasetError::NonFinite(name.to_string()))
    }
}

fn check_unit(name: &str, v: &[f32]) -> Result<(), DatasetError> {
    let norm = v.iter().map(|&c| f64::from(c).powi(2)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() <= UNIT_NORM_TOL {
        Ok(())
    } else {
        Err(DatasetError::NotUnitNorm(name.to_string()))
    }
}

fn write_f32(path: &Path, data: &[f32]) -> Result<(), DatasetError> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32(path: &Path) -> Result<Vec<f32>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DatasetError::Invalid(format!(
            "{}: length not a multiple of 4",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn read_raster(
    path: &Path,
    kind: RasterKind,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Raster, DatasetError> {
    let data = read_f32(path)?;
    let found = data.len();
    let raster = Raster::new(kind, width, height, channels, data).ok_or_else(|| {
        DatasetError::DimensionMismatch {
            what: path.display().to_string(),
            expected: width * height * channels,
            found,
        }
    })?;
    check_finite(&path.display().to_string(), raster.data())?;
    Ok(raster)
}

fn read_keypoints(path: &Path, num_frames: usize) -> Result<Vec<Option<Keypoint>>, DatasetError> {
    let mut track = vec![None; num_frames];
    if !path.exists() {
        return Ok(track);
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 16 != 0 {
        return Err(DatasetError::Invalid(format!(
            "{}: truncated keypoint record",
            path.display()
        )));
    }
    for rec in bytes.chunks_exact(16) {
        let word = |o: usize| [rec[o], rec[o + 1], rec[o + 2], rec[o + 3]];
        let frame = u32::from_le_bytes(word(0)) as usize;
        let kp = Keypoint {
            x: f32::from_le_bytes(word(4)),
            y: f32::from_le_bytes(word(8)),
            confidence: f32::from_le_bytes(word(12)),
        };
        match track.get_mut(frame) {
            Some(slot @ None) => *slot = Some(kp),
            Some(Some(_)) => {
                return Err(DatasetError::Invalid(format!(
                    "{}: duplicate keypoint for frame {frame}",
                    path.display()
                )))
            }
            None => {
                return Err(DatasetError::Invalid(format!(
                    "{}: keypoint frame {frame} out of range",
                    path.display()
                )))
            }
        }
    }
    Ok(track)
}

/// Reads a tab-separated file with a header line, returning the data rows
/// split into fields along with their 1-based line numbers.
pub(crate) fn read_tsv(
    path: &Path,
    header: &str,
) -> Result<Vec<(usize, Vec<String>)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == header => {}
        _ => {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header '{}'", header.replace('\t', "\\t")),
            })
        }
    }
    let ncols = header.split('\t').count();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
        if fields.len() != ncols {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected {ncols} fields, found {}", fields.len()),
            });
        }
        rows.push((idx + 1, fields));
    }
    Ok(rows)
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    name: &str,
    value: &str,
) -> Result<T, DatasetError> {
    value.parse::<T>().map_err(|_| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} '{value}'"),
    })
}

fn parse_bool01(path: &Path, line: usize, value: &str) -> Result<bool, DatasetError> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(DatasetError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad visible flag '{value}'"),
        }),
    }
}

fn read_queries(path: &Path) -> Result<Vec<QueryPoint>, DatasetError> {
    let rows = read_tsv(path, "query_id\tframe\tx\ty\tobject_id")?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        let id: usize = parse_field(path, line, "query_id", &f[0])?;
        if id != out.len() {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("query ids must be consecutive from 0, found {id}"),
            });
        }
        out.push(QueryPoint {
            query_frame: parse_field(path, line, "frame", &f[1])?,
            position: Point2::new(
                parse_field(path, line, "x", &f[2])?,
                parse_field(path, line, "y", &f[3])?,
            ),
            object_id: parse_field(path, line, "object_id", &f[4])?,
        });
    }
    Ok(out)
}

/// Reads a `gt.tsv` file; every (query, frame) pair must appear exactly once.
pub fn read_ground_truth(
    path: &Path,
    num_queries: usize,
    num_frames: usize,
) -> Result<GroundTruth, DatasetError> {
    let rows = read_tsv(path, "query_id\tframe\tx\ty\tvisible")?;
    let mut gt: Vec<Vec<Option<GtPoint>>> = vec![vec![None; num_frames]; num_queries];
    for (line, f) in rows {
        let q: usize = parse_field(path, line, "query_id", &f[0])?;
        let t: usize = parse_field(path, line, "frame", &f[1])?;
        let point = GtPoint {
            position: Point2::new(
                parse_field(path, line, "x", &f[2])?,
                parse_field(path, line, "y", &f[3])?,
            ),
            visible: parse_bool01(path, line, &f[4])?,
        };
        let slot = gt
            .get_mut(q)
            .and_then(|r| r.get_mut(t))
            .ok_or_else(|| DatasetError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("query {q} frame {t} out of range"),
            })?;
        if slot.replace(point).is_some() {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate record for query {q} frame {t}"),
            });
        }
    }
    gt.into_iter()
        .enumerate()
        .map(|(q, track)| {
            track
                .into_iter()
                .enumerate()
                .map(|(t, p)| {
                    p.ok_or_else(|| {
                        DatasetError::Invalid(format!("ground truth missing query {q} frame {t}"))
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(c: usize, k: usize) -> Vec<f32> {
        (0..c).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    /// 4x4, two frames, one object, one query, full schedule.
    fn tiny() -> DatasetContainer {
        let mut c = DatasetContainer::new(4, 4, 2);
        for pair in required_flow_pairs(2, &c.schedule, [0, 1]) {
            c.flows.insert(
                pair,
                FlowRasters::constant(4, 4, Point2::new(0.5, -0.25), 1.0, 0.5),
            );
        }
        c.masks.insert(
            3,
            vec![
                MaskRaster::from_fn(4, 4, |x, _| x < 2),
                MaskRaster::from_fn(4, 4, |_, y| y < 3),
            ],
        );
        c.queries.push(QueryPoint {
            query_frame: 0,
            position: Point2::new(1.0, 1.5),
            object_id: 3,
        });
        let f = Raster::feature(2, 2, 3, unit(3, 1).repeat(4)).unwrap();
        c.features = Some(FeatureSet {
            width: 2,
            height: 2,
            channels: 3,
            frames: vec![f.clone(), f],
            queries: vec![unit(3, 1)],
        });
        c.keypoints = vec![vec![
            None,
            Some(Keypoint {
                x: 1.5,
                y: 1.25,
                confidence: 0.9,
            }),
        ]];
        c.ground_truth = Some(vec![vec![
            GtPoint {
                position: Point2::new(1.0, 1.5),
                visible: true,
            },
            GtPoint {
                position: Point2::new(1.5, 1.25),
                visible: false,
            },
        ]]);
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        c.write(dir.path()).unwrap();
        let back = DatasetContainer::load(dir.path()).unwrap();
        assert_eq!(back.num_frames, 2);
        assert_eq!(back, c);
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = DatasetContainer::load(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingManifest(_)));
    }

    #[test]
    fn missing_required_flow_names_the_pair() {
        let mut c = tiny();
        c.flows.remove(&(0, 1));
        let err = c.validate().unwrap_err();
        assert!(matches!(err, DatasetError::MissingFlow(0, 1)));
        assert!(err.to_string().contains("0->1"));
        c.absent_flows.insert((0, 1));
        c.validate().unwrap();
    }

    #[test]
    fn missing_flow_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        tiny().write(dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.flow_pairs.retain(|p| *p != [0, 1]);
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        let err = DatasetContainer::load(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingFlow(0, 1)), "{err}");
    }

    #[test]
    fn non_binary_mask_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        tiny().write(dir.path()).unwrap();
        let p = dir.path().join("masks/3/1.msk");
        let mut bytes = fs::read(&p).unwrap();
        bytes[5] = 2;
        fs::write(&p, bytes).unwrap();
        let err = DatasetContainer::load(dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("mask not binary"), "{err}");
    }

    #[test]
    fn truncated_raster_is_a_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny().write(dir.path()).unwrap();
        let p = dir.path().join("flow/0_1.occ");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = DatasetContainer::load(dir.path()).unwrap_err();
        assert!(
            matches!(err, DatasetError::DimensionMismatch { .. }),
            "{err}"
        );
    }

    #[test]
    fn corrupt_manifest_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        tiny().write(dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"width\"", "\"widht\"");
        fs::write(&mpath, text).unwrap();
        let err = DatasetContainer::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("widht") || err.contains("width"), "{err}");
    }

    #[test]
    fn nan_flow_refused_at_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.flows.get_mut(&(0, 1)).unwrap().flow.texel_mut(1, 1)[0] = f32::NAN;
        let err = c.write(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::NonFinite(_)));
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn empty_query_list_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.queries.clear();
        c.keypoints.clear();
        c.ground_truth = Some(Vec::new());
        c.features.as_mut().unwrap().queries.clear();
        c.write(dir.path()).unwrap();
        assert_eq!(DatasetContainer::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn non_unit_feature_rejected() {
        let mut c = tiny();
        c.features.as_mut().unwrap().queries[0] = vec![0.5, 0.5, 0.0];
        assert!(matches!(c.validate(), Err(DatasetError::NotUnitNorm(_))));
    }

    #[test]
    fn query_outside_image_rejected() {
        let mut c = tiny();
        c.queries[0].position = Point2::new(9.0, 0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn required_pairs_cover_both_directions() {
        let s = IntervalSchedule::new(true, vec![1, 2]);
        let pairs = required_flow_pairs(4, &s, [0, 3]);
        for p in [(0, 1), (1, 3), (3, 1), (2, 0), (0, 3), (3, 0)] {
            assert!(pairs.contains(&p), "{p:?}");
        }
        assert!(!pairs.contains(&(1, 1)));
    }
}
