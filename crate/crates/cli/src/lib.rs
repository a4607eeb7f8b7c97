//! Experiment runner: synthetic data generation, teacher and student
//! training, evaluation, the distillation ablation and the utilization
//! sweep, each driven by one JSON config.

pub mod commands;
pub mod config;
pub mod svg;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mind_core::{Modality, Preset, Regime};
use serde_json::Value;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mind", version, about = "Weighted unimodal ensemble distillation experiments")]
pub struct Cli {
    /// JSON run config; every field is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory of this command.
    #[arg(long, global = true, default_value = "mind-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multimodal dataset.
    GenData {
        /// Modality-dominance preset: balanced, B_dominant or A_dominant.
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Train the candidate unimodal teachers on the unimodal pools.
    TrainTeachers {
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Train only this modality (A or B).
        #[arg(long, value_parser = parse_modality)]
        modality: Option<Modality>,
    },
    /// Train and evaluate one fusion student.
    TrainStudent {
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Directory of teacher checkpoints written by train-teachers.
        #[arg(long)]
        teachers: PathBuf,
        /// medfuse, medfuse3h, mke_a, mke_b, ts, mind or ume.
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
    },
    /// Re-evaluate trained students on the test split, label by label.
    Evaluate {
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// A train-student output directory; repeat to compare runs.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
    /// The six-setting distillation ablation.
    Ablate {
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Directory of teacher checkpoints written by train-teachers.
        #[arg(long)]
        teachers: PathBuf,
    },
    /// MIND students over the configured (ω_A, ω_B) grid with utilization traces.
    UtilizationSweep {
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Directory of teacher checkpoints written by train-teachers.
        #[arg(long)]
        teachers: PathBuf,
    },
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    match s {
        "A" | "a" => Ok(Modality::A),
        "B" | "b" => Ok(Modality::B),
        other => Err(format!("unknown modality {other:?} (expected A or B)")),
    }
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse()
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeachers { .. } => "train-teachers",
            Command::TrainStudent { .. } => "train-student",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::UtilizationSweep { .. } => "utilization-sweep",
        }
    }
}

/// Runs one command and returns its manifest.
pub fn run(cli: &Cli) -> Result<Value> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = match &cli.command {
        Command::GenData { preset: Some(p) } => RunConfig {
            preset: Some(*p),
            ..config
        },
        _ => config,
    }
    .resolve(cli.seed)?;
    let out = &cli.out;
    let work = || match &cli.command {
        Command::GenData { .. } => commands::gen_data(&config, out),
        Command::TrainTeachers { data, modality } => commands::train_teachers(&mut config.clone(), out, data, *modality),
        Command::TrainStudent { data, teachers, regime } => {
            commands::train_student(&mut config.clone(), out, data, teachers, *regime)
        }
        Command::Evaluate { data, runs } => commands::evaluate(&mut config.clone(), out, data, runs),
        Command::Ablate { data, teachers } => commands::ablate(&mut config.clone(), out, data, teachers),
        Command::UtilizationSweep { data, teachers } => commands::sweep(&mut config.clone(), out, data, teachers),
    };
    match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .context("building the worker pool")?
            .install(work),
        None => work(),
    }
}
