//! Per-query forward and backward passes and their combination.
//!
//! Each pass is strictly sequential: frame `i` reads the states the same pass
//! produced for its source frames. Passes for different queries share nothing
//! but the read-only container, so queries run in parallel.

use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::EngineConfig;
use crate::dataset::{parse_field, read_tsv, DatasetContainer, DatasetError};
use crate::filter::{filter_flow_prediction, filter_keypoint, FilterError};
use crate::flow_chain::{chained_predictions, PassWindow};
use crate::fusion::{fuse_with_keypoint, merge_predictions, FusionError};
use crate::types::{GaussianEstimate, Provenance, TrackState};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("unknown query {0}")]
    UnknownQuery(usize),
    #[error("query {query}: {source}")]
    Filter {
        query: usize,
        #[source]
        source: FilterError,
    },
    #[error("query {query}: {source}")]
    Fusion {
        query: usize,
        #[source]
        source: FusionError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// How query anchors relate to the video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryMode {
    /// The backward pass starts from the last frame and re-walks the video.
    #[default]
    QueryFirst,
    /// Forward runs from the query frame to the end, backward from the query
    /// frame to the start; both are anchored at the query frame.
    QueryStrided,
}

impl FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query_first" | "first" => Ok(QueryMode::QueryFirst),
            "query_strided" | "strided" => Ok(QueryMode::QueryStrided),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// States of one pass, indexed by frame; `None` where the pass did not run.
pub type PassStates = Vec<Option<TrackState>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query_id: usize,
    pub states: Vec<TrackState>,
}

fn step(
    container: &DatasetContainer,
    query: usize,
    target: usize,
    window: PassWindow,
    cfg: &EngineConfig,
    history: &[Option<TrackState>],
    carry: GaussianEstimate,
) -> Result<TrackState, TrackError> {
    let filter_err = |source| TrackError::Filter { query, source };
    let mut accepted = Vec::new();
    for pred in chained_predictions(container, target, window, cfg, history) {
        if filter_flow_prediction(container, query, target, &pred, cfg)
            .map_err(filter_err)?
            .accepted
        {
            accepted.push(pred);
        }
    }
    let merged = merge_predictions(&accepted, target, cfg)
        .map_err(|source| TrackError::Fusion { query, source })?;

    let keypoint = match container.keypoint(query, target) {
        Some(kp)
            if filter_keypoint(container, query, target, &kp, cfg)
                .map_err(filter_err)?
                .accepted =>
        {
            Some(kp.position())
        }
        _ => None,
    };

    let pass = window.direction.provenance();
    Ok(
        match fuse_with_keypoint(merged.estimate, keypoint, pass, cfg) {
            (Some(mut est), prov) => {
                est.sigma = est.sigma.min(cfg.sigma_cap);
                TrackState::visible(est, prov)
            }
            (None, _) => TrackState::occluded(carry),
        },
    )
}

/// Runs `frames` in order with `history` pre-seeded at the window anchor.
fn run_pass(
    container: &DatasetContainer,
    query: usize,
    window: PassWindow,
    cfg: &EngineConfig,
    mut history: PassStates,
    frames: impl Iterator<Item = usize>,
) -> Result<PassStates, TrackError> {
    let mut carry = history[window.anchor]
        .map(|s| s.estimate)
        .expect("seeded anchor");
    for target in frames {
        let state = step(container, query, target, window, cfg, &history, carry)?;
        carry = state.estimate;
        history[target] = Some(state);
    }
    Ok(history)
}

/// Forward pass from the query frame to the last frame.
pub fn forward_pass(
    container: &DatasetContainer,
    query: usize,
    cfg: &EngineConfig,
) -> Result<PassStates, TrackError> {
    let q = *container
        .queries
        .get(query)
        .ok_or(TrackError::UnknownQuery(query))?;
    let mut history = vec![None; container.num_frames];
    history[q.query_frame] = Some(TrackState::anchor(q.position));
    run_pass(
        container,
        query,
        PassWindow::forward(q.query_frame),
        cfg,
        history,
        q.query_frame + 1..container.num_frames,
    )
}

/// Backward pass over earlier frames.
///
/// In query-first mode it is seeded from the last frame's forward state, or
/// from the latest visible forward state when the last frame is occluded; with
/// no visible forward state at all it produces nothing. In strided mode it is
/// anchored at the query frame.
pub fn backward_pass(
    container: &DatasetContainer,
    query: usize,
    cfg: &EngineConfig,
    forward: &[Option<TrackState>],
    mode: QueryMode,
) -> Result<PassStates, TrackError> {
    let q = *container
        .queries
        .get(query)
        .ok_or(TrackError::UnknownQuery(query))?;
    let mut history = vec![None; container.num_frames];
    let seed = match mode {
        QueryMode::QueryStrided => Some((q.query_frame, TrackState::anchor(q.position))),
        QueryMode::QueryFirst => forward
            .iter()
            .enumerate()
            .rev()
            .find_map(|(t, s)| s.filter(|s| s.visible).map(|s| (t, s))),
    };
    let Some((anchor, state)) = seed else {
        return Ok(history);
    };
    history[anchor] = Some(state);
    run_pass(
        container,
        query,
        PassWindow::backward(anchor),
        cfg,
        history,
        (0..anchor).rev(),
    )
}

/// Keeps forward states where visible and falls back to visible backward
/// states elsewhere.
pub fn combine_passes(
    query_id: usize,
    forward: &[Option<TrackState>],
    backward: &[Option<TrackState>],
    fallback: GaussianEstimate,
) -> Trajectory {
    let states = forward
        .iter()
        .zip(backward)
        .map(|(f, b)| match (f, b) {
            (Some(f), _) if f.visible => *f,
            (_, Some(b)) if b.visible => *b,
            (Some(f), _) => *f,
            (None, Some(b)) => *b,
            (None, None) => TrackState::occluded(fallback),
        })
        .collect();
    Trajectory { query_id, states }
}

pub fn track_query(
    container: &DatasetContainer,
    query: usize,
    cfg: &EngineConfig,
    mode: QueryMode,
) -> Result<Trajectory, TrackError> {
    let q = *container
        .queries
        .get(query)
        .ok_or(TrackError::UnknownQuery(query))?;
    let forward = forward_pass(container, query, cfg)?;
    let backward = backward_pass(container, query, cfg, &forward, mode)?;
    Ok(combine_passes(
        query,
        &forward,
        &backward,
        GaussianEstimate::anchor(q.position),
    ))
}

/// Tracks every query on a pool of `parallelism` workers. Results are in
/// query order and do not depend on the worker count. A failing query does
/// not stop the others.
pub fn track_all(
    container: &DatasetContainer,
    cfg: &EngineConfig,
    mode: QueryMode,
    parallelism: usize,
) -> Result<Vec<Result<Trajectory, TrackError>>, TrackError> {
    container.check_schedule(&cfg.intervals)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| TrackError::ThreadPool(e.to_string()))?;
    Ok(pool.install(|| {
        (0..container.queries.len())
            .into_par_iter()
            .map(|q| track_query(container, q, cfg, mode))
            .collect()
    }))
}

pub const TRAJECTORY_HEADER: &str = "query_id\tframe\tx\ty\tvisible\tsigma\tprovenance";

/// Renders trajectories as TSV with six decimals per float.
pub fn trajectories_to_tsv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for traj in trajectories {
        for (t, s) in traj.states.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{t}\t{:.6}\t{:.6}\t{}\t{:.6}\t{}",
                traj.query_id,
                s.estimate.mean.x,
                s.estimate.mean.y,
                u8::from(s.visible),
                s.estimate.sigma,
                s.provenance
            );
        }
    }
    out
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> io::Result<()> {
    std::fs::write(path, trajectories_to_tsv(trajectories))
}

/// Reads a trajectory TSV. Records of a query must cover frames `0..T`
/// contiguously, in order; queries appear in ascending id order.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, DatasetError> {
    let rows = read_tsv(path, TRAJECTORY_HEADER)?;
    let mut out: Vec<Trajectory> = Vec::new();
    for (line, f) in rows {
        let query_id: usize = parse_field(path, line, "query_id", &f[0])?;
        let frame: usize = parse_field(path, line, "frame", &f[1])?;
        let x: f64 = parse_field(path, line, "x", &f[2])?;
        let y: f64 = parse_field(path, line, "y", &f[3])?;
        let visible = match f[4].as_str() {
            "0" => false,
            "1" => true,
            v => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("bad visible flag '{v}'"),
                })
            }
        };
        let sigma: f64 = parse_field(path, line, "sigma", &f[5])?;
        let provenance: Provenance = parse_field(path, line, "provenance", &f[6])?;
        if out.last().map(|t| t.query_id) != Some(query_id) {
            if out.iter().any(|t| t.query_id >= query_id) {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("query {query_id} out of order"),
                });
            }
            out.push(Trajectory {
                query_id,
                states: Vec::new(),
            });
        }
        let traj = out.last_mut().expect("just pushed");
        if frame != traj.states.len() {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected frame {}, found {frame}", traj.states.len()),
            });
        }
        traj.states.push(TrackState {
            estimate: GaussianEstimate::new(crate::Point2::new(x, y), sigma),
            visible,
            provenance,
        });
    }
    Ok(out)
}
