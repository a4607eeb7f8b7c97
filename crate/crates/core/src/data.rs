//! Synthetic multimodal data: a shared label-conditioned latent observed
//! through a noisy feature vector (modality A) and a noisy sequence carrying
//! the signal in a short window (modality B).
//!
//! Large unimodal pools and a small paired subset are produced from one
//! seed. Every sample is drawn from its own `(seed, id)` stream, so
//! generation order does not matter.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::nn::TaskKind;
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"MINDDATA";
pub const DATA_VERSION: u32 = 1;

/// Noise level shared by the presets; dominance presets move the two
/// modalities a factor of two either side of it.
pub const BASE_SNR: f64 = 0.15;

const CALIBRATION_SAMPLES: u64 = 4096;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?} (expected balanced, B_dominant or A_dominant)")]
    UnknownPreset(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset file truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch in split {split}: stored {stored:08x}, computed {computed:08x}")]
    Checksum { split: String, stored: u32, computed: u32 },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub task: TaskKind,
    pub n_unimodal_a: usize,
    pub n_unimodal_b: usize,
    pub n_paired_train: usize,
    /// Size of every validation split (both pools and the paired set).
    pub n_val: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub seq_len: usize,
    /// Number of consecutive timesteps carrying the modality-B signal.
    pub window: usize,
    pub snr_a: f64,
    pub snr_b: f64,
    /// Equicorrelation of the Gaussian copula behind multilabel labels.
    pub label_correlation: f64,
    /// Positive rate per label; `None` means 0.3 for every label.
    pub label_priors: Option<Vec<f64>>,
    /// Norm of each label's contribution to the latent mean.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Multilabel { labels: 5 },
            n_unimodal_a: 8000,
            n_unimodal_b: 8000,
            n_paired_train: 1000,
            n_val: 500,
            n_test: 500,
            latent_dim: 8,
            dim_a: 32,
            dim_b: 8,
            seq_len: 16,
            window: 12,
            snr_a: BASE_SNR,
            snr_b: BASE_SNR,
            label_correlation: 0.3,
            label_priors: None,
            class_separation: 1.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn priors(&self) -> Vec<f64> {
        self.label_priors
            .clone()
            .unwrap_or_else(|| vec![0.3; self.task.outputs()])
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        let outputs = self.task.outputs();
        if outputs == 0 {
            return bad("task needs at least one output".into());
        }
        if self.task.is_multiclass() && outputs < 2 {
            return bad("multiclass task needs at least two classes".into());
        }
        if self.n_paired_train > self.n_unimodal_a.min(self.n_unimodal_b) {
            return bad(format!(
                "n_paired_train ({}) exceeds the smaller unimodal pool ({})",
                self.n_paired_train,
                self.n_unimodal_a.min(self.n_unimodal_b)
            ));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("dim_a", self.dim_a),
            ("dim_b", self.dim_b),
            ("seq_len", self.seq_len),
            ("window", self.window),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.window > self.seq_len {
            return bad(format!("window {} longer than seq_len {}", self.window, self.seq_len));
        }
        for (name, v) in [("snr_a", self.snr_a), ("snr_b", self.snr_b), ("class_separation", self.class_separation)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_correlation) {
            return bad(format!("label_correlation {} outside [0, 1)", self.label_correlation));
        }
        if let Some(p) = &self.label_priors {
            if self.task.is_multiclass() {
                return bad("label_priors apply to binary/multilabel tasks only".into());
            }
            if p.len() != outputs {
                return bad(format!("{} label priors for {} labels", p.len(), outputs));
            }
            if let Some(v) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return bad(format!("label prior {v} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Named modality-dominance regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "balanced")]
    Balanced,
    #[serde(rename = "B_dominant")]
    BDominant,
    #[serde(rename = "A_dominant")]
    ADominant,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Balanced => "balanced",
            Preset::BDominant => "B_dominant",
            Preset::ADominant => "A_dominant",
        }
    }

    pub fn config(self) -> GeneratorConfig {
        let (snr_a, snr_b) = match self {
            Preset::Balanced => (BASE_SNR, BASE_SNR),
            Preset::BDominant => (BASE_SNR / 2.0, BASE_SNR * 2.0),
            Preset::ADominant => (BASE_SNR * 2.0, BASE_SNR / 2.0),
        };
        GeneratorConfig {
            snr_a,
            snr_b,
            ..GeneratorConfig::default()
        }
    }
}

impl FromStr for Preset {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "balanced" => Ok(Preset::Balanced),
            "B_dominant" => Ok(Preset::BDominant),
            "A_dominant" => Ok(Preset::ADominant),
            other => Err(DataError::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn dominance_preset(name: &str) -> Result<GeneratorConfig, DataError> {
    name.parse::<Preset>().map(Preset::config)
}

/// One sample with its presence flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: u64,
    pub x_a: Option<Vec<f64>>,
    pub x_b: Option<Vec<f64>>,
    pub y: Vec<f64>,
}

impl MultimodalSample {
    pub fn present_a(&self) -> bool {
        self.x_a.is_some()
    }

    pub fn present_b(&self) -> bool {
        self.x_b.is_some()
    }
}

/// A split in which every sample has the same modalities present.
/// `x_a` is `[n, dim_a]`, `x_b` is `[n, seq_len, dim_b]`, `y` is `[n, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub ids: Vec<u64>,
    pub x_a: Option<Tensor>,
    pub x_b: Option<Tensor>,
    pub y: Tensor,
}

/// Rows of a split gathered for one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_a: Option<Tensor>,
    pub x_b: Option<Tensor>,
    pub y: Tensor,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_a(&self) -> bool {
        self.x_a.is_some()
    }

    pub fn has_b(&self) -> bool {
        self.x_b.is_some()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            x_a: self.x_a.as_ref().map(|x| x.gather_rows(indices)),
            x_b: self.x_b.as_ref().map(|x| x.gather_rows(indices)),
            y: self.y.gather_rows(indices),
        }
    }

    pub fn sample(&self, i: usize) -> MultimodalSample {
        let row = |t: &Tensor| {
            let w = t.len() / self.len();
            t.data()[i * w..(i + 1) * w].to_vec()
        };
        MultimodalSample {
            id: self.ids[i],
            x_a: self.x_a.as_ref().map(row),
            x_b: self.x_b.as_ref().map(row),
            y: row(&self.y),
        }
    }
}

/// Splits in file order.
pub const SPLIT_NAMES: [&str; 7] = [
    "pool_a_train",
    "pool_a_val",
    "pool_b_train",
    "pool_b_val",
    "paired_train",
    "paired_val",
    "paired_test",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub pool_a_train: Split,
    pub pool_a_val: Split,
    pub pool_b_train: Split,
    pub pool_b_val: Split,
    pub paired_train: Split,
    pub paired_val: Split,
    pub paired_test: Split,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &Split); 7] {
        [
            (SPLIT_NAMES[0], &self.pool_a_train),
            (SPLIT_NAMES[1], &self.pool_a_val),
            (SPLIT_NAMES[2], &self.pool_b_train),
            (SPLIT_NAMES[3], &self.pool_b_val),
            (SPLIT_NAMES[4], &self.paired_train),
            (SPLIT_NAMES[5], &self.paired_val),
            (SPLIT_NAMES[6], &self.paired_test),
        ]
    }

    /// Training and validation splits of one modality's unimodal pool.
    pub fn pool(&self, modality: crate::nn::Modality) -> (&Split, &Split) {
        match modality {
            crate::nn::Modality::A => (&self.pool_a_train, &self.pool_a_val),
            crate::nn::Modality::B => (&self.pool_b_train, &self.pool_b_val),
        }
    }
}

/// One draw from the generative process, before dropping absent modalities.
#[derive(Debug, Clone)]
pub struct Draw {
    pub y: Vec<f64>,
    /// Latent including its isotropic noise.
    pub h: Vec<f64>,
    pub x_a: Vec<f64>,
    pub x_b: Vec<f64>,
}

/// The fixed parameters of the generative process for one config.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    /// Per-label (or per-class) latent directions, unit norm.
    means: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
    w_a: Vec<f64>,
    w_b: Vec<f64>,
    noise_a: Vec<f64>,
    noise_b: Vec<f64>,
}

fn gaussian_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

/// Gram–Schmidt on random Gaussian vectors; falls back to plain normalised
/// vectors once the latent space is exhausted.
fn latent_directions(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = gaussian_vec(rng, dim, 1.0);
        if i < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

/// `tanh(h W)` for `W` stored row-major `[k, d]`.
fn mix(h: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (hk, row) in h.iter().zip(w.chunks(d)) {
        out.iter_mut().zip(row).for_each(|(o, wk)| *o += hk * wk);
    }
    out.iter_mut().for_each(|o| *o = o.tanh());
    out
}

fn column_variance(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

impl Generator {
    pub fn new(config: &GeneratorConfig) -> Result<Self, DataError> {
        config.validate()?;
        let k = config.latent_dim;
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let thresholds = config.priors().iter().map(|&p| normal.inverse_cdf(p)).collect();
        let means = latent_directions(&mut substream(config.seed, "generator:means"), config.task.outputs(), k);
        let scale = 1.0 / (k as f64).sqrt();
        let w_a = gaussian_vec(&mut substream(config.seed, "generator:w_a"), k * config.dim_a, scale);
        let w_b = gaussian_vec(&mut substream(config.seed, "generator:w_b"), k * config.dim_b, scale);
        let mut gen = Self {
            config: config.clone(),
            means,
            thresholds,
            w_a,
            w_b,
            noise_a: Vec::new(),
            noise_b: Vec::new(),
        };
        // Noise is set per feature from the signal variance so that the
        // configured SNR holds feature by feature.
        let (sig_a, sig_b): (Vec<_>, Vec<_>) = (0..CALIBRATION_SAMPLES)
            .map(|i| {
                let mut rng = substream(config.seed, &format!("calibration:{i}"));
                let (_, h) = gen.labels_and_latent(&mut rng);
                (mix(&h, &gen.w_a, config.dim_a), mix(&h, &gen.w_b, config.dim_b))
            })
            .unzip();
        gen.noise_a = column_variance(&sig_a).iter().map(|v| (v / config.snr_a).sqrt()).collect();
        gen.noise_b = column_variance(&sig_b).iter().map(|v| (v / config.snr_b).sqrt()).collect();
        Ok(gen)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Unit latent direction associated with each label (or class).
    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    fn labels_and_latent(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let outputs = c.task.outputs();
        let sep = c.class_separation;
        let mut h = gaussian_vec(rng, c.latent_dim, 1.0);
        let y = if c.task.is_multiclass() {
            let class = rng.gen_range(0..outputs);
            h.iter_mut().zip(&self.means[class]).for_each(|(v, m)| *v += sep * m);
            (0..outputs).map(|j| f64::from(u8::from(j == class))).collect()
        } else {
            let rho = c.label_correlation;
            let shared: f64 = rng.sample(StandardNormal);
            let y: Vec<f64> = self
                .thresholds
                .iter()
                .map(|&t| {
                    let e: f64 = rng.sample(StandardNormal);
                    let z = rho.sqrt() * shared + (1.0 - rho).sqrt() * e;
                    f64::from(u8::from(z < t))
                })
                .collect();
            for (label, mean) in y.iter().zip(&self.means) {
                let sign = 2.0 * label - 1.0;
                h.iter_mut().zip(mean).for_each(|(v, m)| *v += sep * sign * m);
            }
            y
        };
        (y, h)
    }

    pub fn draw(&self, id: u64) -> Draw {
        let c = &self.config;
        let mut rng = substream(c.seed, &format!("sample:{id}"));
        let (y, h) = self.labels_and_latent(&mut rng);
        let x_a = mix(&h, &self.w_a, c.dim_a)
            .iter()
            .zip(&self.noise_a)
            .map(|(s, sd)| s + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let signal_b = mix(&h, &self.w_b, c.dim_b);
        let start = rng.gen_range(0..=c.seq_len - c.window);
        let mut x_b = Vec::with_capacity(c.seq_len * c.dim_b);
        for t in 0..c.seq_len {
            let on = (start..start + c.window).contains(&t);
            for (j, sd) in self.noise_b.iter().enumerate() {
                let noise = sd * rng.sample::<f64, _>(StandardNormal);
                x_b.push(if on { signal_b[j] + noise } else { noise });
            }
        }
        Draw { y, h, x_a, x_b }
    }

    fn split(&self, first_id: u64, n: usize, has_a: bool, has_b: bool) -> Split {
        let c = &self.config;
        let draws: Vec<Draw> = (first_id..first_id + n as u64).into_par_iter().map(|id| self.draw(id)).collect();
        let stack = |f: &dyn Fn(&Draw) -> &[f64], shape: Vec<usize>| {
            let data: Vec<f64> = draws.iter().flat_map(|d| f(d).iter().copied()).collect();
            tensor_or_empty(shape, data)
        };
        Split {
            ids: (first_id..first_id + n as u64).collect(),
            x_a: has_a.then(|| stack(&|d| &d.x_a, vec![n, c.dim_a])),
            x_b: has_b.then(|| stack(&|d| &d.x_b, vec![n, c.seq_len, c.dim_b])),
            y: stack(&|d| &d.y, vec![n, c.task.outputs()]),
        }
    }
}

fn tensor_or_empty(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    if shape.contains(&0) {
        Tensor::zeros(&shape)
    } else {
        Tensor::new(shape, data).expect("generated data matches its shape")
    }
}

/// Presence pattern and size of each split, in file order.
fn layout(c: &GeneratorConfig) -> [(usize, bool, bool); 7] {
    [
        (c.n_unimodal_a, true, false),
        (c.n_val, true, false),
        (c.n_unimodal_b, false, true),
        (c.n_val, false, true),
        (c.n_paired_train, true, true),
        (c.n_val, true, true),
        (c.n_test, true, true),
    ]
}

/// Generates every split. Sample ids are assigned consecutively in split
/// order, so splits are disjoint by construction.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset, DataError> {
    let gen = Generator::new(config)?;
    let mut next = 0u64;
    let mut splits = layout(config).map(|(n, a, b)| {
        let s = gen.split(next, n, a, b);
        next += n as u64;
        Some(s)
    });
    let mut take = |i: usize| splits[i].take().expect("each split taken once");
    Ok(Dataset {
        config: config.clone(),
        pool_a_train: take(0),
        pool_a_val: take(1),
        pool_b_train: take(2),
        pool_b_val: take(3),
        paired_train: take(4),
        paired_val: take(5),
        paired_test: take(6),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitMeta {
    name: String,
    count: usize,
    has_a: bool,
    has_b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataMeta {
    config: GeneratorConfig,
    dim_a: usize,
    dim_b: usize,
    seq_len: usize,
    outputs: usize,
    checksum: String,
    splits: Vec<SplitMeta>,
}

const MASK_A: u8 = 1;
const MASK_B: u8 = 2;

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a dataset:
///
/// ```text
/// "MINDDATA" | version u32 | meta_len u64 | meta JSON
/// per split: ids u64[n] | mask u8[n] | x_a f64[n*dim_a]? | x_b f64[n*t*dim_b]? | y f64[n*L] | crc32 u32
/// ```
///
/// All integers and floats are little-endian; `x_a`/`x_b` are present only
/// when the split carries that modality. The CRC covers the split payload.
pub fn encode(ds: &Dataset) -> Vec<u8> {
    let c = &ds.config;
    let meta = DataMeta {
        config: c.clone(),
        dim_a: c.dim_a,
        dim_b: c.dim_b,
        seq_len: c.seq_len,
        outputs: c.task.outputs(),
        checksum: "crc32".into(),
        splits: ds
            .splits()
            .iter()
            .map(|(name, s)| SplitMeta {
                name: name.to_string(),
                count: s.len(),
                has_a: s.has_a(),
                has_b: s.has_b(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, s) in ds.splits() {
        let mut payload = Vec::new();
        for id in &s.ids {
            payload.extend_from_slice(&id.to_le_bytes());
        }
        let mask = (if s.has_a() { MASK_A } else { 0 }) | (if s.has_b() { MASK_B } else { 0 });
        payload.extend(std::iter::repeat(mask).take(s.len()));
        if let Some(x) = &s.x_a {
            push_f64s(&mut payload, x.data());
        }
        if let Some(x) = &s.x_b {
            push_f64s(&mut payload, x.data());
        }
        push_f64s(&mut payload, s.y.data());
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DataError::Truncated(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").map_err(|_| DataError::BadMagic)? != DATA_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != DATA_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: DATA_VERSION,
        });
    }
    let meta_len = r.u64("metadata length")? as usize;
    let meta: DataMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    let names: Vec<&str> = meta.splits.iter().map(|s| s.name.as_str()).collect();
    if names != SPLIT_NAMES {
        return Err(DataError::Malformed(format!("unexpected split list {names:?}")));
    }
    let c = &meta.config;
    let mut splits = Vec::with_capacity(7);
    for sm in &meta.splits {
        let n = sm.count;
        let len_a = if sm.has_a { n * meta.dim_a * 8 } else { 0 };
        let len_b = if sm.has_b { n * meta.seq_len * meta.dim_b * 8 } else { 0 };
        let payload_len = n * 8 + n + len_a + len_b + n * meta.outputs * 8;
        let payload = r.take(payload_len, &format!("split {}", sm.name))?;
        let stored = r.u32(&format!("checksum of split {}", sm.name))?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(DataError::Checksum {
                split: sm.name.clone(),
                stored,
                computed,
            });
        }
        let mut p = Reader { bytes: payload, pos: 0 };
        let ids = p
            .take(n * 8, "ids")?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected_mask = (if sm.has_a { MASK_A } else { 0 }) | (if sm.has_b { MASK_B } else { 0 });
        if let Some(i) = p.take(n, "mask")?.iter().position(|&m| m != expected_mask) {
            return Err(DataError::Malformed(format!("split {} row {i}: presence mask disagrees with metadata", sm.name)));
        }
        let x_a = sm
            .has_a
            .then(|| p.take(len_a, "x_a").map(|b| tensor_or_empty(vec![n, meta.dim_a], f64s(b))))
            .transpose()?;
        let x_b = sm
            .has_b
            .then(|| p.take(len_b, "x_b").map(|b| tensor_or_empty(vec![n, meta.seq_len, meta.dim_b], f64s(b))))
            .transpose()?;
        let y = tensor_or_empty(vec![n, meta.outputs], f64s(p.take(n * meta.outputs * 8, "y")?));
        splits.push(Some(Split { ids, x_a, x_b, y }));
    }
    if r.pos != bytes.len() {
        return Err(DataError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut take = |i: usize| splits[i].take().expect("seven splits");
    Ok(Dataset {
        config: c.clone(),
        pool_a_train: take(0),
        pool_a_val: take(1),
        pool_b_train: take(2),
        pool_b_val: take(3),
        paired_train: take(4),
        paired_val: take(5),
        paired_test: take(6),
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    Ok(fs::write(path, encode(ds))?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    decode(&fs::read(path)?)
}
