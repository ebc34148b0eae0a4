//! Command-line driver: dataset generation, training, rollout evaluation,
//! planning suites, masking ablations and influence reports.

pub mod commands;
pub mod config;
pub mod lg;
pub mod pipeline;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cjepa::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(cjepa::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cjepa", version, about = "Object-centric masked world-model experiments")]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the CJEPA_OUT variable takes precedence).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; execution is sequential, so values above 1 are ignored.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate train/validation trajectories and encoded caches.
    GenData,
    /// Train a predictor and write a checkpoint with its loss curve.
    Train,
    /// Rollout error per step for the checkpoints in `eval.checkpoints`.
    Eval,
    /// MPC suite with `plan.checkpoint` plus the random baseline.
    Plan,
    /// Masking strategy by budget table.
    Ablate,
    /// Exact neighborhoods and trained-model influence on a linear-Gaussian system.
    Influence,
    /// Re-render plots and index the outputs in the output directory.
    Report,
}

impl Cli {
    /// Parses `args`, collecting every `--set` wherever it appears.
    /// Clap alone keeps only the occurrences on one side of the subcommand.
    pub fn parse_args<I, T>(args: I) -> Result<Self, clap::Error>
    where
        I: IntoIterator<Item = T>,
        T: Into<std::ffi::OsString>,
    {
        let mut rest = Vec::new();
        let mut set = Vec::new();
        let mut it = args.into_iter().map(Into::into);
        while let Some(a) = it.next() {
            match a.to_str() {
                Some("--set") => match it.next() {
                    Some(v) => set.push(v.to_string_lossy().into_owned()),
                    None => rest.push(a),
                },
                Some(s) if s.starts_with("--set=") => set.push(s["--set=".len()..].to_string()),
                _ => rest.push(a),
            }
        }
        let mut cli = Cli::try_parse_from(rest)?;
        cli.set = set;
        Ok(cli)
    }
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Plan => "plan",
            Command::Ablate => "ablate",
            Command::Influence => "influence",
            Command::Report => "report",
        }
    }
}

/// Resolves configuration and output directory, then runs the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
        rc.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        rc.set("seed", &seed.to_string())?;
    }
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    if cli.threads > 1 {
        log::warn!("running sequentially; --threads {} ignored", cli.threads);
    }
    let out = std::env::var_os("CJEPA_OUT").map(PathBuf::from).unwrap_or_else(|| cli.out.clone());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(format!("{}.resolved.cfg", cli.command.name())), rc.resolved())?;
    commands::dispatch(cli.command, &rc, &out)
}
