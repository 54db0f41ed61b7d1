//! Command-line driver: simulate, filter, train, project and cluster stages
//! sharing one artifact directory.

pub mod artifact;
pub mod config;
pub mod stages;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use thiserror::Error;

use config::{DeviationName, MeasureName, PipelineConfig};
pub use stages::{Context, StageReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Simulate,
    Filter,
    Train,
    Project,
    Cluster,
    /// All of the above in order.
    Pipeline,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Parser)]
#[command(name = "neuroscale", version, about = "Multibeam sonar analysis pipeline")]
pub struct Cli {
    #[arg(value_enum)]
    pub stage: Stage,
    /// TOML file of namespaced keys such as `simulate.n_beams = 64`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory [default: out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training dissimilarity; sets the spectrum measure instead when the stage is `cluster`.
    #[arg(long, value_enum)]
    pub measure: Option<MeasureName>,
    #[arg(long, value_enum)]
    pub deviation: Option<DeviationName>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub latent_dim: Option<u8>,
    /// Consume artifacts whose recorded config hash differs from the current config.
    #[arg(long)]
    pub allow_stale: bool,
}

#[derive(Debug, Error)]
pub enum Failure {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input {path}; run the {producer} stage first")]
    Missing { path: String, producer: Stage },
    #[error("{path} was built from config hash {found} but the current config gives {expected}; rerun the upstream stage or pass --allow-stale")]
    Stale {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] neuroscale::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {failure}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub failure: Failure,
}

impl Cli {
    /// The config file plus flag overrides.
    pub fn context(&self) -> Result<Context, Failure> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path).map_err(Failure::Config)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(measure) = self.measure {
            if self.stage == Stage::Cluster {
                cfg.cluster.measure = measure;
            } else {
                cfg.train.measure = measure;
            }
        }
        if let Some(d) = self.deviation {
            cfg.train.deviation = d;
        }
        if let Some(m) = self.latent_dim {
            cfg.train.latent_dim = m as usize;
        }
        let out = self.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| "out".into());
        Ok(Context {
            cfg,
            out,
            allow_stale: self.allow_stale,
        })
    }
}

fn run_one(stage: Stage, ctx: &Context) -> Result<StageReport, StageError> {
    let result = match stage {
        Stage::Simulate => stages::simulate(ctx),
        Stage::Filter => stages::filter(ctx),
        Stage::Train => stages::train_stage(ctx),
        Stage::Project => stages::project_stage(ctx),
        Stage::Cluster => stages::cluster(ctx),
        Stage::Pipeline => unreachable!("pipeline expands to its stages"),
    };
    result.map_err(|failure| StageError { stage, failure })
}

/// Runs the requested stage(s), handing each report to `on_report` as it completes.
pub fn run(ctx: &Context, stage: Stage, mut on_report: impl FnMut(&StageReport)) -> Result<Vec<StageReport>, StageError> {
    let order: &[Stage] = match stage {
        Stage::Pipeline => &[Stage::Simulate, Stage::Filter, Stage::Train, Stage::Project, Stage::Cluster],
        _ => std::slice::from_ref(&stage),
    };
    let mut reports = Vec::with_capacity(order.len());
    for &s in order {
        let report = run_one(s, ctx)?;
        on_report(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Loads the config named by `cli` and runs it, printing one line per stage.
pub fn main_with(cli: &Cli) -> Result<Vec<StageReport>, StageError> {
    let ctx = cli.context().map_err(|failure| StageError {
        stage: cli.stage,
        failure,
    })?;
    run(&ctx, cli.stage, |r| println!("{r}"))
}
