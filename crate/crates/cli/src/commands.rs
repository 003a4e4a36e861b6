use std::fs;
use std::path::Path;

use probtrack_core::dataset::{read_ground_truth, MaskRaster};
use probtrack_core::dense_mask::{connected_component_oracle, dense_assign as assign, DENSE_DIR};
use probtrack_core::metrics::{evaluate, MetricsError, Resolution};
use probtrack_core::synth::{generate, SceneScript, SynthError};
use probtrack_core::tracker::{
    read_trajectories, track_all, write_trajectories, QueryMode, TrackError,
};
use probtrack_core::{ConfigError, DatasetContainer, DatasetError, EngineConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Alignment(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Alignment(_) => 4,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::MissingManifest(_) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrackError> for CliError {
    fn from(e: TrackError) -> Self {
        match e {
            TrackError::Dataset(d) => d.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::MissingArea { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Alignment(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Dataset(d) => d.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn track(
    container: &Path,
    out: &Path,
    cfg: &EngineConfig,
    mode: QueryMode,
    parallelism: usize,
) -> Result<(), CliError> {
    let c = DatasetContainer::load(container)?;
    let trajectories = track_all(&c, cfg, mode, parallelism)?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    write_trajectories(out, &trajectories).map_err(|e| io_error(out, e))?;
    println!(
        "tracked {} queries over {} frames -> {}",
        trajectories.len(),
        c.num_frames,
        out.display()
    );
    Ok(())
}

pub fn eval(
    pred: &Path,
    gt: Option<&Path>,
    container: Option<&Path>,
    resolution: Option<(usize, usize)>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let trajectories = read_trajectories(pred)?;
    let c = container.map(DatasetContainer::load).transpose()?;
    let num_frames = trajectories
        .first()
        .map(|t| t.states.len())
        .or(c.as_ref().map(|c| c.num_frames))
        .unwrap_or(0);
    let truth = match (gt, &c) {
        (Some(p), _) => read_ground_truth(p, trajectories.len(), num_frames)?,
        (None, Some(c)) => c
            .ground_truth
            .clone()
            .ok_or_else(|| CliError::Validation("container has no ground truth".into()))?,
        (None, None) => {
            return Err(CliError::Validation("need --gt or --container".into()));
        }
    };
    let (w, h) = match (resolution, &c) {
        (Some(r), _) => r,
        (None, Some(c)) => (c.width, c.height),
        (None, None) => {
            return Err(CliError::Validation(
                "need --resolution or --container".into(),
            ));
        }
    };
    let areas: Option<Vec<Vec<f64>>> = c.as_ref().filter(|c| !c.masks.is_empty()).map(|c| {
        c.queries
            .iter()
            .map(|q| {
                (0..c.num_frames)
                    .map(|t| c.mask(q.object_id, t).map_or(f64::NAN, |m| m.area() as f64))
                    .collect()
            })
            .collect()
    });
    let areas = areas.filter(|a| a.iter().flatten().all(|v| v.is_finite()));
    let report = evaluate(
        &trajectories,
        &truth,
        Resolution::new(w, h),
        areas.as_deref(),
    )?;
    print!("{}", report.to_text());
    if let Some(out) = out {
        fs::write(out, report.to_tsv()).map_err(|e| io_error(out, e))?;
    }
    Ok(())
}

pub fn synth(script: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let text = fs::read_to_string(script).map_err(|e| io_error(script, e))?;
    let mut s = SceneScript::parse(&text)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let (c, _) = generate(&s)?;
    c.write(out)?;
    println!(
        "wrote {}x{}x{} container with {} queries and {} flow pairs -> {}",
        c.width,
        c.height,
        c.num_frames,
        c.queries.len(),
        c.flows.len(),
        out.display()
    );
    Ok(())
}

/// Uses the container's object masks at `frame` as regions; pixels no mask
/// covers form regions of their own by 4-connectivity.
pub fn dense_assign(container: &Path, frame: usize, out: Option<&Path>) -> Result<(), CliError> {
    let c = DatasetContainer::load(container)?;
    if frame >= c.num_frames {
        return Err(CliError::Validation(format!(
            "frame {frame} out of range (num_frames {})",
            c.num_frames
        )));
    }
    let masks: Vec<(u32, &MaskRaster)> = c
        .masks
        .iter()
        .filter_map(|(&id, m)| m.get(frame).map(|m| (id, m)))
        .collect();
    let labels: Vec<u32> = (0..c.width * c.height)
        .map(|k| {
            let (x, y) = (k % c.width, k / c.width);
            masks
                .iter()
                .find(|(_, m)| m.get(x, y))
                .map_or(0, |&(id, _)| id + 1)
        })
        .collect();
    let mut oracle = connected_component_oracle(c.width, c.height, &labels);
    let a =
        assign(&mut oracle, c.width, c.height).map_err(|e| CliError::Validation(e.to_string()))?;
    let dir = out.map_or_else(
        || container.join("masks").join(DENSE_DIR),
        Path::to_path_buf,
    );
    a.export(&dir).map_err(|e| CliError::Io(e.to_string()))?;
    println!(
        "{} masks from {} oracle calls -> {}",
        a.masks.len(),
        a.oracle_calls(),
        dir.display()
    );
    Ok(())
}
