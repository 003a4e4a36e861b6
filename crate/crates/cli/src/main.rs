mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use probtrack_core::config::FIELDS;
use probtrack_core::tracker::QueryMode;
use probtrack_core::EngineConfig;

use commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "probtrack",
    version,
    about = "Probabilistic point tracking over precomputed rasters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track every query of a container and write a trajectory TSV.
    Track(TrackArgs),
    /// Score a trajectory file against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic container from a scene script.
    Synth(SynthArgs),
    /// Partition a frame into masks and export the assignment.
    DenseAssign(DenseArgs),
    /// Draw trajectories onto frame images.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// Engine config file (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set outlier_dist_px=8. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl EngineArgs {
    fn resolve(&self) -> Result<EngineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => EngineConfig::load(p)?,
            None => EngineConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                CliError::Validation(format!("--set expects KEY=VALUE, got '{kv}'"))
            })?;
            cfg.set(k.trim(), v.trim()).map_err(CliError::Validation)?;
        }
        Ok(cfg.validate()?)
    }
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    container: PathBuf,
    /// Trajectory TSV to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    /// Worker threads for query-level parallelism.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    parallelism: u32,
    /// query_first or query_strided.
    #[arg(long, default_value = "query_first", value_parser = parse_mode)]
    mode: QueryMode,
}

fn parse_mode(s: &str) -> Result<QueryMode, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Trajectory TSV produced by `track`.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth TSV; defaults to the container's gt.tsv.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Container supplying resolution, mask areas and default ground truth.
    #[arg(long)]
    container: Option<PathBuf>,
    /// Native resolution as WxH when no container is given.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Machine-readable report TSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or("bad dimension")
    };
    Ok((parse(w)?, parse(h)?))
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene script.
    #[arg(long)]
    script: PathBuf,
    /// Container directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Replace the script's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DenseArgs {
    #[arg(long)]
    container: PathBuf,
    /// Reference frame.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Output directory; defaults to <container>/masks/dense.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    /// Trajectory TSV.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of <t>.png frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trail length in frames.
    #[arg(long, default_value_t = 10)]
    trail: usize,
}

fn config_help() -> String {
    let defaults = EngineConfig::default();
    let mut s = String::from("Config fields (file key or --set KEY=VALUE), with defaults:\n");
    for (key, what) in FIELDS {
        let value = defaults.get(key).unwrap_or_default();
        s.push_str(&format!("  {key:<24} {value:<18} {what}\n"));
    }
    s
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Track(a) => {
            let cfg = a.engine.resolve()?;
            commands::track(&a.container, &a.out, &cfg, a.mode, a.parallelism as usize)
        }
        Command::Eval(a) => commands::eval(
            &a.pred,
            a.gt.as_deref(),
            a.container.as_deref(),
            a.resolution,
            a.out.as_deref(),
        ),
        Command::Synth(a) => commands::synth(&a.script, &a.out, a.seed),
        Command::DenseAssign(a) => commands::dense_assign(&a.container, a.frame, a.out.as_deref()),
        Command::Overlay(a) => overlay::run(&a.pred, &a.frames, &a.out, a.trail),
    }
}

fn main() -> ExitCode {
    let help = config_help();
    let mut cmd = Cli::command().after_help(help.clone());
    cmd = cmd.mut_subcommand("track", |c| c.after_help(help));
    let cli = match cmd
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("probtrack: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
