//! `flowm`: generate data, train, evaluate, verify and render.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 failed
//! verification, 3 I/O or file-format error.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowm::config::{load_config, parse_horizons, RunConfig};
use flowm::env::{generate_episodes, read_dataset, write_dataset};
use flowm::equiv::{
    check_all, check_flow_laws, check_relative_motion, check_self_motion_closure,
    check_recurrence_equivariance, CheckSetup, EquivReport,
};
use flowm::eval::{evaluate_params, render_rollout, write_eval_outputs};
use flowm::flow::VelocitySet;
use flowm::model::read_checkpoint;
use flowm::train::{train, RunFiles};
use flowm::Error;

use manifest::RunManifest;

const DATASET_FILE: &str = "dataset.fwm";

#[derive(Parser)]
#[command(name = "flowm", version, about = "Flow equivariant world models on the 2D torus")]
struct Cli {
    /// Worker threads for batch and rollout parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sequential reductions on one thread; outputs are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of episodes.
    GenData(GenDataArgs),
    /// Train a model with BPTT and Adam.
    Train(TrainArgs),
    /// Roll out checkpoints and write metrics.csv and summary.csv.
    Eval(EvalArgs),
    /// Run the exact equivariance checks.
    Verify(VerifyArgs),
    /// Write ground-truth and predicted frames as PGM images.
    Render(RenderArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    world: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    sprites: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives dataset.fwm and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    /// `procedural` or `idx:<path>`.
    #[arg(long)]
    sprite_source: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset file, or a directory holding dataset.fwm.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; without it the last 10% of `--data` is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ablation: Option<String>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint files; one summary row each. Repeatable or comma-separated.
    #[arg(long, required = true, value_delimiter = ',')]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated prediction horizons, e.g. `20,150`.
    #[arg(long)]
    horizons: Option<String>,
    /// Context frames before the rollout (default: train.obs_len).
    #[arg(long)]
    obs_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Flow,
    Theorem,
    Closure,
    Relative,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per suite.
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Episode index in the dataset.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// Frames to predict (default: every frame after the context).
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    obs_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Core(Error),
    Verify(EquivReport),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Version(_) | Error::Truncated(_) => 3,
        _ => 1,
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve(args: &ConfigArgs, mut flags: Vec<(String, String)>) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects SECTION.KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    overrides.append(&mut flags);
    Ok(load_config(args.config.as_deref(), &overrides)?)
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<(String, String)> {
    v.as_ref().map(|v| (key.to_string(), v.to_string()))
}

fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let flags = [
        flag("env.subset", &a.subset),
        flag("env.world", &a.world),
        flag("env.window", &a.window),
        flag("env.sprites", &a.sprites),
        flag("env.frames", &a.frames),
        flag("env.episodes", &a.episodes),
        flag("env.sprite_source", &a.sprite_source),
    ];
    let cfg = resolve(&a.cfg, flags.into_iter().flatten().collect())?;
    let manifest = RunManifest::new("gen-data", a.seed, cfg.clone());
    let episodes = generate_episodes(&cfg.env, cfg.episodes, a.seed)?;
    let path = a.out.join(DATASET_FILE);
    write_dataset(&path, &episodes)?;
    manifest.finish(&a.out, vec![path.clone()])?;
    println!("wrote {} episodes to {}", episodes.len(), path.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, deterministic: bool) -> CliResult<()> {
    let mut flags: Vec<(String, String)> = [
        flag("train.seed", &a.seed),
        flag("train.epochs", &a.epochs),
        flag("model.ablation", &a.ablation),
        flag("train.max_steps", &a.max_steps),
    ]
    .into_iter()
    .flatten()
    .collect();
    if deterministic {
        flags.push(("train.deterministic".to_string(), "true".to_string()));
    }
    let cfg = resolve(&a.cfg, flags)?;
    let data = dataset_path(&a.data);
    let val = a.val.as_deref().map(dataset_path);
    let manifest = RunManifest::new("train", cfg.train.seed, cfg.clone());
    let outcome = train(&cfg.model, &cfg.train, &data, val.as_deref(), &a.out)?;
    let files = RunFiles::in_dir(&a.out);
    manifest.finish(&a.out, vec![files.metrics, files.last, files.best])?;
    match outcome.best_val {
        Some(v) => println!(
            "{} steps; best validation MSE {v:.6e} at step {}",
            outcome.steps, outcome.best_step
        ),
        None => println!("{} steps", outcome.steps),
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let cfg = resolve(&a.cfg, Vec::new())?;
    let horizons = match &a.horizons {
        Some(h) => parse_horizons(h)?,
        None => cfg.horizons.clone(),
    };
    let obs_len = a.obs_len.unwrap_or(cfg.train.obs_len);
    let episodes = read_dataset(&dataset_path(&a.data))?;
    let mut evals = Vec::new();
    for (i, path) in a.checkpoint.iter().enumerate() {
        let (model, params) = read_checkpoint(path)?;
        let base = model.ablation().map_or("custom", |x| x.name());
        let label = if a.checkpoint.len() > 1 && evals.iter().any(|e: &flowm::eval::Evaluation| e.label == base) {
            format!("{base}#{i}")
        } else {
            base.to_string()
        };
        evals.push(evaluate_params(&params, &model, &episodes, obs_len, &horizons, &label)?);
    }
    let mut manifest = RunManifest::new("eval", cfg.train.seed, cfg);
    manifest.config.horizons = horizons;
    write_eval_outputs(&a.out, &evals)?;
    manifest.finish(&a.out, vec![a.out.join("metrics.csv"), a.out.join("summary.csv")])?;
    println!("evaluated {} checkpoint(s) on {} episodes", evals.len(), episodes.len());
    Ok(())
}

fn verify_cmd(a: &VerifyArgs) -> CliResult<()> {
    let setup = CheckSetup::default();
    let report = match a.suite {
        Suite::Flow => check_flow_laws(&[5, 8, 16], &VelocitySet::square(2), 10, a.seed)?,
        Suite::Theorem => check_recurrence_equivariance(&setup, a.seed, a.trials)?,
        Suite::Closure => check_self_motion_closure(&setup, a.seed, a.trials)?,
        Suite::Relative => check_relative_motion(&setup, a.seed, a.trials)?,
        Suite::All => check_all(a.seed, a.trials)?,
    };
    print!("{}", report.table());
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Verify(report))
    }
}

fn render_cmd(a: &RenderArgs) -> CliResult<()> {
    let cfg = resolve(&a.cfg, Vec::new())?;
    let (model, params) = read_checkpoint(&a.checkpoint)?;
    let episodes = read_dataset(&dataset_path(&a.data))?;
    let episode = episodes.get(a.episode).ok_or_else(|| {
        Error::Config(format!("episode {} out of range ({} episodes)", a.episode, episodes.len()))
    })?;
    let obs_len = a.obs_len.unwrap_or(cfg.train.obs_len);
    let horizon = a.horizon.unwrap_or(episode.frames.len().saturating_sub(obs_len));
    let manifest = RunManifest::new("render", episode.seed, cfg);
    let paths = render_rollout(&params, &model, episode, obs_len, horizon, &a.out)?;
    manifest.finish(&a.out, paths.clone())?;
    println!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, cli.deterministic),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Render(a) => render_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(report)) => {
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            eprintln!("verification failed: {}", failed.join(", "));
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_taxonomy() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Parse { line: 1, msg: "x".into() }), 1);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::Version("x".into())), 3);
        assert_eq!(exit_code(&Error::Truncated("x".into())), 3);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let e = Cli::try_parse_from(["flowm", "verify", "--bogus"]).err().unwrap();
        assert!(e.use_stderr());
        assert!(Cli::try_parse_from(["flowm", "verify", "--suite", "all", "--seed", "7"]).is_ok());
    }
}
