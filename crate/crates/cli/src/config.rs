//! Run configuration file.
//!
//! One JSON document drives every subcommand. Unknown keys are rejected and
//! every field has a default, so `{}` is a valid config. The top-level
//! `seed` replaces the seeds of the nested generator and training configs.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mind_core::rng::derive_seed;
use mind_core::{EncoderSpec, GeneratorConfig, LossWeights, Modality, Preset, Regime, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Replaces `data.snr_a`/`data.snr_b` with the preset's values.
    pub preset: Option<Preset>,
    pub data: GeneratorConfig,
    pub teachers: TeacherSettings,
    pub student: StudentSettings,
    pub evaluation: EvaluationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSettings {
    pub hidden: usize,
    /// One candidate teacher per depth and modality.
    pub depths: Vec<usize>,
    pub dropout: f64,
    /// Ensemble size per modality.
    pub k: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSettings {
    pub hidden: usize,
    pub depth_a: usize,
    pub depth_b: usize,
    pub dropout: f64,
    /// Regime, loss weights and optimisation of `train-student`.
    pub train: TrainConfig,
    /// (ω_A, ω_B) of the weighted ablation settings.
    pub tuned_omega: (f64, f64),
    pub sweep_omegas: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    pub n_bootstrap: usize,
}

/// Selected on a held-out generator seed by paired-validation AUROC.
pub const TUNED_OMEGA: (f64, f64) = (10.0, 10.0);

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            preset: None,
            data: GeneratorConfig::default(),
            teachers: TeacherSettings::default(),
            student: StudentSettings::default(),
            evaluation: EvaluationSettings::default(),
        }
    }
}

impl Default for TeacherSettings {
    fn default() -> Self {
        Self {
            hidden: 32,
            depths: vec![1, 2, 3],
            dropout: 0.0,
            k: 3,
            train: TrainConfig {
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl Default for StudentSettings {
    fn default() -> Self {
        Self {
            hidden: 32,
            depth_a: 1,
            depth_b: 1,
            dropout: 0.3,
            train: TrainConfig {
                regime: Regime::Mind,
                weights: LossWeights::default().with_omegas(TUNED_OMEGA.0, TUNED_OMEGA.1),
                ..TrainConfig::default()
            },
            tuned_omega: TUNED_OMEGA,
            sweep_omegas: mind_core::trainer::SWEEP_OMEGAS.to_vec(),
        }
    }
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self { n_bootstrap: 1000 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    /// Applies the seed override and preset, then checks the whole config.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(preset) = self.preset {
            let p = preset.config();
            self.data.snr_a = p.snr_a;
            self.data.snr_b = p.snr_b;
        }
        self.data.seed = self.seed;
        self.student.train.seed = self.seed;
        self.teachers.train.seed = self.seed;
        self.data.validate()?;
        self.teachers.train.validate()?;
        self.student.train.validate()?;
        if self.teachers.depths.is_empty() || self.teachers.depths.contains(&0) {
            bail!("teachers.depths must list positive depths");
        }
        if self.teachers.k == 0 || self.teachers.k > self.teachers.depths.len() {
            bail!(
                "teachers.k = {} but only {} candidates per modality",
                self.teachers.k,
                self.teachers.depths.len()
            );
        }
        if self.student.depth_a == 0 || self.student.depth_b == 0 {
            bail!("student depths must be positive");
        }
        for spec in [self.student_spec(Modality::A), self.student_spec(Modality::B)] {
            spec.validate()?;
        }
        Ok(self)
    }

    fn spec(&self, modality: Modality, hidden: usize, depth: usize, dropout: f64) -> EncoderSpec {
        match modality {
            Modality::A => EncoderSpec::mlp(self.data.dim_a, &vec![hidden; depth], dropout),
            Modality::B => EncoderSpec::recurrent(self.data.dim_b, hidden, depth, dropout),
        }
    }

    pub fn teacher_spec(&self, modality: Modality, depth: usize) -> EncoderSpec {
        self.spec(modality, self.teachers.hidden, depth, self.teachers.dropout)
    }

    pub fn student_spec(&self, modality: Modality) -> EncoderSpec {
        let depth = match modality {
            Modality::A => self.student.depth_a,
            Modality::B => self.student.depth_b,
        };
        self.spec(modality, self.student.hidden, depth, self.student.dropout)
    }

    /// Training config of one candidate teacher; every candidate gets its
    /// own derived seed.
    pub fn teacher_train(&self, modality: Modality, depth: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &format!("teacher:{}:{depth}", modality.label())),
            ..self.teachers.train.clone()
        }
    }
}
