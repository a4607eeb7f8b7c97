//! Modality encoders, the three-head fusion student, unimodal teachers and
//! frozen teacher ensembles.
//!
//! Modality A carries flat feature vectors and is encoded by a dense MLP;
//! modality B carries sequences and is encoded by a stacked tanh RNN. A
//! [`FusionModel`] has one classification head per encoder plus a linear
//! fusion head over the concatenated latents, so either encoder can be used
//! on its own when a sample lacks the other modality.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid_tensor, softmax_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("modality {0:?} is missing; use the unimodal path for single-modality samples")]
    MissingModality(Modality),
    #[error("batch sizes differ: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("{modality:?} encoder expects input {expected}, got shape {actual:?}")]
    InputShape {
        modality: Modality,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("sequence input has no timesteps")]
    EmptySequence,
    #[error("teacher ensemble has no members")]
    EmptyEnsemble,
    #[error("parameters are frozen")]
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
        }
    }
}

/// Prediction task. Binary is multilabel with a single label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    Binary,
    Multilabel { labels: usize },
    Multiclass { classes: usize },
}

impl TaskKind {
    /// Width of every classification head.
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Binary => 1,
            TaskKind::Multilabel { labels } => labels,
            TaskKind::Multiclass { classes } => classes,
        }
    }

    pub fn is_multiclass(self) -> bool {
        matches!(self, TaskKind::Multiclass { .. })
    }

    /// Converts logits to probabilities: sigmoid per label, or softmax over
    /// classes at temperature `tau`.
    pub fn probabilities(self, logits: &Tensor, tau: f64) -> Tensor {
        if self.is_multiclass() {
            softmax_tensor(logits, tau)
        } else {
            sigmoid_tensor(logits)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    DenseMlp,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Per-feature width (per-timestep width for recurrent encoders).
    pub input_dim: usize,
    /// Hidden widths, one per layer. The last is the latent width.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl EncoderSpec {
    pub fn mlp(input_dim: usize, layer_sizes: &[usize], dropout_rate: f64) -> Self {
        Self {
            kind: EncoderKind::DenseMlp,
            input_dim,
            layer_sizes: layer_sizes.to_vec(),
            dropout_rate,
        }
    }

    pub fn recurrent(input_dim: usize, hidden: usize, num_layers: usize, dropout_rate: f64) -> Self {
        Self {
            kind: EncoderKind::Recurrent,
            input_dim,
            layer_sizes: vec![hidden; num_layers],
            dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.is_empty() {
            return Err(NnError::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.input_dim == 0 || self.layer_sizes.contains(&0) {
            return Err(NnError::InvalidSpec("widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec has a layer")
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len()
    }
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape and data agree")
        .with_requires_grad(true)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: uniform_fan_in(&[input, output], input, rng),
            bias: Tensor::zeros(&[output]).with_requires_grad(true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &mut Vec<Var>) -> Result<Var, TensorError> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        bound.extend([w, b]);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// One layer of an Elman RNN: `h_t = tanh(x_t W_in + h_{t-1} W_rec + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnLayer {
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub bias: Tensor,
}

impl RnnLayer {
    fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_in: uniform_fan_in(&[input, hidden], input, rng),
            w_rec: uniform_fan_in(&[hidden, hidden], hidden, rng),
            bias: Tensor::zeros(&[hidden]).with_requires_grad(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderLayers {
    Mlp(Vec<Linear>),
    Recurrent(Vec<RnnLayer>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub layers: EncoderLayers,
}

impl Encoder {
    pub fn init(spec: &EncoderSpec, rng: &mut Rng) -> Result<Self, NnError> {
        spec.validate()?;
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.layer_sizes);
        let layers = match spec.kind {
            EncoderKind::DenseMlp => {
                EncoderLayers::Mlp(widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect())
            }
            EncoderKind::Recurrent => EncoderLayers::Recurrent(
                widths.windows(2).map(|w| RnnLayer::init(w[0], w[1], rng)).collect(),
            ),
        };
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    fn check_input(&self, modality: Modality, shape: &[usize]) -> Result<(), NnError> {
        let d = self.spec.input_dim;
        let ok = match (self.spec.kind, shape) {
            (EncoderKind::DenseMlp, [_, w]) => *w == d,
            (EncoderKind::Recurrent, [_, t, w]) => {
                if *t == 0 {
                    return Err(NnError::EmptySequence);
                }
                *w == d
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            let expected = match self.spec.kind {
                EncoderKind::DenseMlp => format!("[batch, {d}]"),
                EncoderKind::Recurrent => format!("[batch, t, {d}]"),
            };
            Err(NnError::InputShape {
                modality,
                expected,
                actual: shape.to_vec(),
            })
        }
    }

    /// Encodes `x` to a `[batch, latent]` representation. Recurrent encoders
    /// return the top layer's final hidden state.
    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &mut Vec<Var>) -> Result<Var, TensorError> {
        let rate = self.spec.dropout_rate;
        match &self.layers {
            EncoderLayers::Mlp(layers) => {
                let mut h = x;
                for layer in layers {
                    let pre = layer.forward(tape, h, bound)?;
                    let act = tape.relu(pre)?;
                    h = tape.dropout(act, rate)?;
                }
                Ok(h)
            }
            EncoderLayers::Recurrent(layers) => {
                let vars: Vec<[Var; 3]> = layers
                    .iter()
                    .map(|l| {
                        let v = [tape.leaf(&l.w_in), tape.leaf(&l.w_rec), tape.leaf(&l.bias)];
                        bound.extend(v);
                        v
                    })
                    .collect();
                let steps = tape.shape(x)[1];
                let mut state: Vec<Option<Var>> = vec![None; layers.len()];
                for t in 0..steps {
                    let mut input = tape.slice_timestep(x, t)?;
                    for (slot, [w_in, w_rec, b]) in state.iter_mut().zip(&vars) {
                        let mut pre = tape.matmul(input, *w_in)?;
                        if let Some(prev) = *slot {
                            let rec = tape.matmul(prev, *w_rec)?;
                            pre = tape.add(pre, rec)?;
                        }
                        let pre = tape.add_bias(pre, *b)?;
                        let h = tape.tanh(pre)?;
                        *slot = Some(h);
                        input = h;
                    }
                }
                tape.dropout(state.last().copied().flatten().expect("at least one layer"), rate)
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match &self.layers {
            EncoderLayers::Mlp(layers) => layers.iter().flat_map(Linear::params).collect(),
            EncoderLayers::Recurrent(layers) => {
                layers.iter().flat_map(|l| [&l.w_in, &l.w_rec, &l.bias]).collect()
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.layers {
            EncoderLayers::Mlp(layers) => layers.iter_mut().flat_map(Linear::params_mut).collect(),
            EncoderLayers::Recurrent(layers) => layers
                .iter_mut()
                .flat_map(|l| [&mut l.w_in, &mut l.w_rec, &mut l.bias])
                .collect(),
        }
    }
}

/// Anything with an ordered parameter list.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad())
    }
}

/// Encoder plus a linear head: a unimodal teacher, or one branch of the
/// fusion student.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalModel {
    pub modality: Modality,
    pub task: TaskKind,
    pub encoder: Encoder,
    pub head: Linear,
}

/// Latent and logits of a unimodal forward pass, plus the tape handles of
/// every parameter in canonical order.
pub struct UnimodalForward {
    pub latent: Var,
    pub logits: Var,
    pub params: Vec<Var>,
}

impl UnimodalModel {
    pub fn init(modality: Modality, spec: &EncoderSpec, task: TaskKind, seed: u64) -> Result<Self, NnError> {
        let mut rng = substream(seed, &format!("init:unimodal:{}", modality.label()));
        let encoder = Encoder::init(spec, &mut rng)?;
        let head = Linear::init(spec.latent_dim(), task.outputs(), &mut rng);
        Ok(Self {
            modality,
            task,
            encoder,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<UnimodalForward, NnError> {
        self.encoder.check_input(self.modality, x.shape())?;
        let x = tape.constant(x.clone());
        let mut params = Vec::new();
        let latent = self.encoder.forward(tape, x, &mut params)?;
        let logits = self.head.forward(tape, latent, &mut params)?;
        Ok(UnimodalForward { latent, logits, params })
    }

    /// Inference-mode `(latent, logits)`.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor), NnError> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, x)?;
        Ok((tape.tensor(out.latent), tape.tensor(out.logits)))
    }

    /// Inference-mode probabilities.
    pub fn predict_proba(&self, x: &Tensor, tau: f64) -> Result<Tensor, NnError> {
        let (_, logits) = self.predict(x)?;
        Ok(self.task.probabilities(&logits, tau))
    }

    /// Marks every parameter as non-trainable. Forward results are unchanged.
    pub fn freeze(mut self) -> Self {
        for p in self.params_mut() {
            p.set_requires_grad(false);
        }
        self
    }
}

impl Parameterized for UnimodalModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// The three-head joint-fusion student.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub task: TaskKind,
    pub encoder_a: Encoder,
    pub head_a: Linear,
    pub encoder_b: Encoder,
    pub head_b: Linear,
    /// Linear map from `concat(z_A, z_B)` to the outputs.
    pub fusion: Linear,
}

pub struct FusionForward {
    pub fusion: Var,
    pub head_a: Var,
    pub head_b: Var,
    /// Parameter handles in checkpoint order.
    pub params: Vec<Var>,
}

impl FusionModel {
    pub fn init(spec_a: &EncoderSpec, spec_b: &EncoderSpec, task: TaskKind, seed: u64) -> Result<Self, NnError> {
        let mut rng_a = substream(seed, "init:fusion:A");
        let mut rng_b = substream(seed, "init:fusion:B");
        let mut rng_f = substream(seed, "init:fusion:AB");
        let encoder_a = Encoder::init(spec_a, &mut rng_a)?;
        let head_a = Linear::init(spec_a.latent_dim(), task.outputs(), &mut rng_a);
        let encoder_b = Encoder::init(spec_b, &mut rng_b)?;
        let head_b = Linear::init(spec_b.latent_dim(), task.outputs(), &mut rng_b);
        let fusion = Linear::init(spec_a.latent_dim() + spec_b.latent_dim(), task.outputs(), &mut rng_f);
        Ok(Self {
            task,
            encoder_a,
            head_a,
            encoder_b,
            head_b,
            fusion,
        })
    }

    /// Runs all three heads. Dropout is active only on a training tape.
    pub fn forward(&self, tape: &mut Tape, x_a: &Tensor, x_b: &Tensor) -> Result<FusionForward, NnError> {
        self.encoder_a.check_input(Modality::A, x_a.shape())?;
        self.encoder_b.check_input(Modality::B, x_b.shape())?;
        if x_a.shape()[0] != x_b.shape()[0] {
            return Err(NnError::BatchMismatch(x_a.shape()[0], x_b.shape()[0]));
        }
        let xa = tape.constant(x_a.clone());
        let xb = tape.constant(x_b.clone());
        let mut params = Vec::new();
        let z_a = self.encoder_a.forward(tape, xa, &mut params)?;
        let head_a = self.head_a.forward(tape, z_a, &mut params)?;
        let z_b = self.encoder_b.forward(tape, xb, &mut params)?;
        let head_b = self.head_b.forward(tape, z_b, &mut params)?;
        let joint = tape.concat(&[z_a, z_b])?;
        let fusion = self.fusion.forward(tape, joint, &mut params)?;
        Ok(FusionForward {
            fusion,
            head_a,
            head_b,
            params,
        })
    }

    /// Like [`FusionModel::forward`] but accepts optional modalities and
    /// reports which one is missing.
    pub fn forward_checked(
        &self,
        tape: &mut Tape,
        x_a: Option<&Tensor>,
        x_b: Option<&Tensor>,
    ) -> Result<FusionForward, NnError> {
        let x_a = x_a.ok_or(NnError::MissingModality(Modality::A))?;
        let x_b = x_b.ok_or(NnError::MissingModality(Modality::B))?;
        self.forward(tape, x_a, x_b)
    }

    /// Inference-mode logits `(fusion, head_a, head_b)`.
    pub fn predict(&self, x_a: &Tensor, x_b: &Tensor) -> Result<(Tensor, Tensor, Tensor), NnError> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, x_a, x_b)?;
        Ok((tape.tensor(out.fusion), tape.tensor(out.head_a), tape.tensor(out.head_b)))
    }

    /// Inference on a single modality through its own encoder and head; the
    /// other modality is never consulted.
    pub fn predict_unimodal(&self, modality: Modality, x: &Tensor) -> Result<Tensor, NnError> {
        self.branch(modality).predict(x).map(|(_, logits)| logits)
    }

    /// A standalone copy of one encoder-plus-head branch.
    pub fn branch(&self, modality: Modality) -> UnimodalModel {
        let (encoder, head) = match modality {
            Modality::A => (&self.encoder_a, &self.head_a),
            Modality::B => (&self.encoder_b, &self.head_b),
        };
        UnimodalModel {
            modality,
            task: self.task,
            encoder: encoder.clone(),
            head: head.clone(),
        }
    }

    pub fn spec(&self, modality: Modality) -> &EncoderSpec {
        match modality {
            Modality::A => &self.encoder_a.spec,
            Modality::B => &self.encoder_b.spec,
        }
    }
}

impl Parameterized for FusionModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder_a.params();
        p.extend(self.head_a.params());
        p.extend(self.encoder_b.params());
        p.extend(self.head_b.params());
        p.extend(self.fusion.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder_a.params_mut();
        p.extend(self.head_a.params_mut());
        p.extend(self.encoder_b.params_mut());
        p.extend(self.head_b.params_mut());
        p.extend(self.fusion.params_mut());
        p
    }
}

/// K frozen unimodal teachers whose probabilities are averaged into a
/// single distillation target.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    modality: Modality,
    members: Vec<UnimodalModel>,
}

impl TeacherEnsemble {
    /// Freezes and wraps `members`.
    pub fn new(modality: Modality, members: Vec<UnimodalModel>) -> Result<Self, NnError> {
        if members.is_empty() {
            return Err(NnError::EmptyEnsemble);
        }
        Ok(Self {
            modality,
            members: members.into_iter().map(UnimodalModel::freeze).collect(),
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn members(&self) -> &[UnimodalModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.members.iter().map(Parameterized::num_params).sum()
    }

    /// Mean member probability per output. Multiclass members are softened
    /// at temperature `tau` before averaging.
    pub fn predict_with_temperature(&self, x: &Tensor, tau: f64) -> Result<Tensor, NnError> {
        let probs = self
            .members
            .iter()
            .map(|m| m.predict_proba(x, tau))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(mean_of(&probs))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.predict_with_temperature(x, 1.0)
    }
}

/// Elementwise mean of equally shaped tensors. Values are summed in sorted
/// order so the result does not depend on the order of `parts`.
pub fn mean_of(parts: &[Tensor]) -> Tensor {
    let k = parts.len() as f64;
    let mut buf = vec![0.0; parts.len()];
    let data = (0..parts[0].len())
        .map(|i| {
            for (b, p) in buf.iter_mut().zip(parts) {
                *b = p.data()[i];
            }
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / k
        })
        .collect();
    Tensor::new(parts[0].shape().to_vec(), data).expect("shapes agree")
}

/// Free-function form of [`TeacherEnsemble::predict`]: the ensemble's mean probability.
pub fn ensemble_predict(ensemble: &TeacherEnsemble, x: &Tensor) -> Result<Tensor, NnError> {
    ensemble.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TASK: TaskKind = TaskKind::Multilabel { labels: 3 };

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "x");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn student(seed: u64, dropout: f64) -> FusionModel {
        FusionModel::init(
            &EncoderSpec::mlp(6, &[5, 4], dropout),
            &EncoderSpec::recurrent(3, 4, 2, dropout),
            TASK,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        assert_eq!(student(1, 0.0), student(1, 0.0));
        assert_ne!(student(1, 0.0), student(2, 0.0));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = UnimodalModel::init(Modality::A, &EncoderSpec::mlp(100, &[8], 0.0), TASK, 3).unwrap();
        let w = &m.encoder.params()[0];
        assert_eq!(w.shape(), &[100, 8]);
        assert!(w.data().iter().all(|x| x.abs() <= 0.1));
        assert!(m.encoder.params()[1].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn spec_validation() {
        assert!(EncoderSpec::mlp(4, &[], 0.0).validate().is_err());
        assert!(EncoderSpec::mlp(4, &[3, 0], 0.0).validate().is_err());
        assert!(EncoderSpec::mlp(4, &[3], 1.0).validate().is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = UnimodalModel::init(Modality::A, &EncoderSpec::mlp(6, &[4], 0.0), TASK, 0).unwrap();
        m.head.weight.data_mut().fill(0.0);
        let (_, logits) = m.predict(&rand_tensor(&[5, 6], 1)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_batch_independent() {
        let m = UnimodalModel::init(Modality::B, &EncoderSpec::recurrent(3, 4, 2, 0.0), TASK, 0).unwrap();
        let x = rand_tensor(&[16, 5, 3], 9);
        let (_, full) = m.predict(&x).unwrap();
        let (_, one) = m.predict(&x.gather_rows(&[7])).unwrap();
        assert_eq!(one.data(), full.row(7));
    }

    #[test]
    fn recurrent_latent_depends_on_order() {
        let m = UnimodalModel::init(Modality::B, &EncoderSpec::recurrent(2, 4, 1, 0.0), TASK, 5).unwrap();
        let seq = Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let permuted = Tensor::new(vec![1, 3, 2], vec![-1.0, 0.5, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let (za, _) = m.predict(&seq).unwrap();
        let (zb, _) = m.predict(&permuted).unwrap();
        assert_ne!(za.data(), zb.data());
    }

    #[test]
    fn input_shape_errors() {
        let m = student(0, 0.0);
        let mut tape = Tape::inference();
        let bad = rand_tensor(&[2, 7], 0);
        let xb = rand_tensor(&[2, 4, 3], 0);
        assert!(matches!(
            m.forward(&mut tape, &bad, &xb),
            Err(NnError::InputShape { modality: Modality::A, .. })
        ));
        let xa = rand_tensor(&[3, 6], 0);
        assert!(matches!(m.forward(&mut tape, &xa, &xb), Err(NnError::BatchMismatch(3, 2))));
        assert!(matches!(
            m.forward_checked(&mut tape, Some(&xa), None),
            Err(NnError::MissingModality(Modality::B))
        ));
        let empty = Tensor::zeros(&[2, 0, 3]);
        assert!(matches!(
            m.branch(Modality::B).predict(&empty),
            Err(NnError::EmptySequence)
        ));
    }

    #[test]
    fn head_a_ignores_modality_b() {
        let m = student(4, 0.0);
        let xa = rand_tensor(&[4, 6], 1);
        let (_, a1, _) = m.predict(&xa, &rand_tensor(&[4, 5, 3], 2)).unwrap();
        let (_, a2, _) = m.predict(&xa, &rand_tensor(&[4, 5, 3], 3)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(m.predict_unimodal(Modality::A, &xa).unwrap(), a1);
    }

    #[test]
    fn zero_latents_give_fusion_bias() {
        let mut m = student(4, 0.0);
        m.fusion.bias = Tensor::from_vec(vec![0.3, -0.2, 0.1]).with_requires_grad(true);
        // relu(0) and tanh(0) are both zero.
        if let EncoderLayers::Mlp(layers) = &mut m.encoder_a.layers {
            let last = layers.last_mut().unwrap();
            last.weight.data_mut().fill(0.0);
        }
        if let EncoderLayers::Recurrent(layers) = &mut m.encoder_b.layers {
            let last = layers.last_mut().unwrap();
            last.w_in.data_mut().fill(0.0);
            last.w_rec.data_mut().fill(0.0);
        }
        let (fusion, _, _) = m.predict(&rand_tensor(&[2, 6], 1), &rand_tensor(&[2, 5, 3], 1)).unwrap();
        for r in 0..2 {
            assert_eq!(fusion.row(r), &[0.3, -0.2, 0.1]);
        }
    }

    #[test]
    fn inference_mode_disables_dropout() {
        let xa = rand_tensor(&[4, 6], 1);
        let xb = rand_tensor(&[4, 5, 3], 2);
        let with_rate = student(4, 0.3);
        let without = student(4, 0.0);
        let (f1, a1, b1) = with_rate.predict(&xa, &xb).unwrap();
        let mut tape = Tape::training(11);
        let out = without.forward(&mut tape, &xa, &xb).unwrap();
        assert_eq!(f1, tape.tensor(out.fusion));
        assert_eq!(a1, tape.tensor(out.head_a));
        assert_eq!(b1, tape.tensor(out.head_b));
    }

    #[test]
    fn head_separation_in_gradients() {
        let m = student(8, 0.0);
        let mut tape = Tape::training(0);
        let out = m.forward(&mut tape, &rand_tensor(&[3, 6], 1), &rand_tensor(&[3, 5, 3], 2)).unwrap();
        let loss = tape.sum_all(out.head_a).unwrap();
        tape.backward(loss).unwrap();
        let n_a = m.encoder_a.params().len() + 2;
        let n_b = m.encoder_b.params().len() + 2;
        for v in &out.params[n_a..n_a + n_b] {
            assert!(tape.grad(*v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        }
        assert!(tape.grad(out.params[0]).is_some());
    }

    #[test]
    fn freeze_keeps_forward_and_drops_grads() {
        let m = UnimodalModel::init(Modality::A, &EncoderSpec::mlp(6, &[4], 0.0), TASK, 0).unwrap();
        let x = rand_tensor(&[3, 6], 1);
        let before = m.predict(&x).unwrap();
        let frozen = m.freeze();
        assert!(frozen.is_frozen());
        assert_eq!(frozen.predict(&x).unwrap(), before);
    }

    #[test]
    fn ensemble_average_and_permutation() {
        let members: Vec<_> = (0..3)
            .map(|s| UnimodalModel::init(Modality::A, &EncoderSpec::mlp(6, &[4], 0.0), TASK, s).unwrap())
            .collect();
        let x = rand_tensor(&[5, 6], 3);
        let ens = TeacherEnsemble::new(Modality::A, members.clone()).unwrap();
        let mut rev = members.clone();
        rev.reverse();
        let ens_rev = TeacherEnsemble::new(Modality::A, rev).unwrap();
        assert_eq!(ens.predict(&x).unwrap(), ens_rev.predict(&x).unwrap());
        let single = TeacherEnsemble::new(Modality::A, vec![members[0].clone()]).unwrap();
        assert_eq!(single.predict(&x).unwrap(), members[0].predict_proba(&x, 1.0).unwrap());
        assert!(matches!(TeacherEnsemble::new(Modality::A, vec![]), Err(NnError::EmptyEnsemble)));
    }

    #[test]
    fn mean_of_three() {
        let parts: Vec<_> = [0.2, 0.4, 0.6].iter().map(|&p| Tensor::from_vec(vec![p])).collect();
        assert!((mean_of(&parts).data()[0] - 0.4).abs() < 1e-15);
    }
}
