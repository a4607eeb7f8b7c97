//! Two-stage training: unimodal teachers on the large pools, then a
//! three-head fusion student on the paired set under any loss regime.
//!
//! A run is strictly sequential and seeded: minibatch order comes from a
//! `(seed, "shuffle:{epoch}")` stream and dropout masks from per-batch
//! derived seeds, so the same inputs always give the same bytes.
//! Independent runs (ablation settings, sweep points) go through rayon and
//! are collected in run order.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Split};
use crate::losses::{baseline_loss, mind_loss, supervised_loss, BaselineRegime, LossBreakdown, LossError, LossWeights, TeacherTargets, Term};
use crate::metrics::{self, MetricValue, MetricsReport, Utilization};
use crate::nn::{EncoderSpec, FusionModel, Modality, NnError, Parameterized, TaskKind, TeacherEnsemble, UnimodalModel};
use crate::rng::{derive_seed, substream};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("{split} split lacks modality {modality:?}")]
    MissingModality { split: &'static str, modality: Modality },
    #[error("regime `{regime}` ({row}) needs a modality-{modality:?} teacher ensemble but none was supplied")]
    MissingTeacher {
        regime: &'static str,
        row: &'static str,
        modality: Modality,
    },
    #[error("regime `{0}` is not trained; use its prediction path instead")]
    NotTrainable(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        breakdown: LossBreakdown,
    },
    #[error("validation AUROC undefined at epoch {0} (no label has both classes)")]
    UndefinedValidation(usize),
    #[error("need at least {k} candidates, got {available}")]
    TooFewCandidates { k: usize, available: usize },
    #[error("parameter {0} is frozen")]
    Frozen(usize),
    #[error("adam: {0}")]
    Adam(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Training objective of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Medfuse,
    Medfuse3h,
    MkeA,
    MkeB,
    Ts,
    Mind,
    /// Averaged unimodal predictions; nothing is trained.
    Ume,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Medfuse,
        Regime::Medfuse3h,
        Regime::MkeA,
        Regime::MkeB,
        Regime::Ts,
        Regime::Mind,
        Regime::Ume,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Medfuse => "medfuse",
            Regime::Medfuse3h => "medfuse3h",
            Regime::MkeA => "mke_a",
            Regime::MkeB => "mke_b",
            Regime::Ts => "ts",
            Regime::Mind => "mind",
            Regime::Ume => "ume",
        }
    }

    pub fn loss_row(self) -> &'static str {
        match self.baseline() {
            Some(b) => b.loss_row(),
            None if self == Regime::Mind => "L_S_AB + L_S_A + L_S_B + w_A L_EKD_A + w_B L_EKD_B",
            None => "mean(p_A, p_B), no training",
        }
    }

    pub fn baseline(self) -> Option<BaselineRegime> {
        match self {
            Regime::Medfuse => Some(BaselineRegime::Medfuse),
            Regime::Medfuse3h => Some(BaselineRegime::Medfuse3h),
            Regime::MkeA => Some(BaselineRegime::MkeA),
            Regime::MkeB => Some(BaselineRegime::MkeB),
            Regime::Ts => Some(BaselineRegime::Ts),
            Regime::Mind | Regime::Ume => None,
        }
    }

    /// Whether the unimodal heads g_A and g_B receive any training signal.
    pub fn has_unimodal_heads(self) -> bool {
        matches!(self, Regime::Medfuse3h | Regime::Mind)
    }

    /// Teachers `(A, B)` the regime reads under weights `w`.
    pub fn teachers_needed(self, w: &LossWeights) -> (bool, bool) {
        match self {
            Regime::Mind => (w.omega_a != 0.0, w.omega_b != 0.0),
            Regime::MkeA => (true, false),
            Regime::MkeB => (false, true),
            Regime::Ts => (w.alpha != 0.0, w.beta != 0.0),
            Regime::Ume => (true, true),
            Regime::Medfuse | Regime::Medfuse3h => (false, false),
        }
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown regime {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Frozen parameters are rejected.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Adam(format!(
            "{} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| !p.requires_grad()) {
        return Err(TrainError::Frozen(i));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(TrainError::Adam(format!("parameter {i}: length mismatch")));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub regime: Regime,
    pub weights: LossWeights,
    pub eval_every: usize,
    pub utilization_every: usize,
    /// Compute teacher targets once for the whole training split instead of
    /// per minibatch. Results are identical; only the cost moves.
    pub cache_teacher_outputs: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 300,
            patience: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            regime: Regime::Mind,
            weights: LossWeights::default(),
            eval_every: 1,
            utilization_every: 5,
            cache_teacher_outputs: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.patience >= self.max_epochs {
            return bad(format!("patience {} must be below max_epochs {}", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.utilization_every == 0 {
            return bad("batch_size, eval_every and utilization_every must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        let w = &self.weights;
        if [w.omega_a, w.omega_b, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("omega_a, omega_b and gamma must be finite and non-negative".into());
        }
        if !(0.0..=0.9).contains(&w.alpha) || !(0.0..=0.9).contains(&w.beta) {
            return bad(format!("alpha {} and beta {} must lie in [0, 0.9]", w.alpha, w.beta));
        }
        if !(w.tau >= 1.0 && w.tau.is_finite()) {
            return bad(format!("tau {} must be at least 1", w.tau));
        }
        Ok(())
    }
}

/// Validation AUROC/AUPRC of one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub auroc: MetricValue,
    pub auprc: MetricValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    /// The model-selection head: fusion for a student, the only head for a
    /// teacher.
    pub main: HeadMetrics,
    pub head_a: Option<HeadMetrics>,
    pub head_b: Option<HeadMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean of the minibatch breakdowns.
    pub train: LossBreakdown,
    pub val: Option<ValRow>,
    /// Best selection AUROC seen so far (non-decreasing).
    pub best_val_auroc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

/// Conditional utilization at one epoch; the accuracy functional is the
/// validation macro AUROC of each head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRow {
    pub epoch: usize,
    pub acc_ab: f64,
    pub acc_a: f64,
    pub acc_b: f64,
    pub u_a: f64,
    pub u_b: f64,
    pub d_util: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRow>,
    pub batches: Vec<BatchRow>,
    pub utilization: Vec<UtilizationRow>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_auroc: f64,
}

fn term(t: Term) -> String {
    if t.present {
        t.value.to_string()
    } else {
        String::new()
    }
}

fn metric(m: Option<MetricValue>) -> String {
    match m {
        None => String::new(),
        Some(v) => match v {
            MetricValue::Value(x) => x.to_string(),
            MetricValue::Undefined => "undefined".into(),
        },
    }
}

impl TrainLog {
    /// Per-epoch CSV. Absent loss components and unevaluated metrics are
    /// empty cells.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(
            "epoch,total,s_AB,s_A,s_B,ekd_A,ekd_B,val_auroc,val_auprc,val_auroc_A,val_auprc_A,val_auroc_B,val_auprc_B,best_val_auroc\n",
        );
        for r in &self.epochs {
            let t = &r.train;
            let head = |h: Option<HeadMetrics>| (metric(h.map(|h| h.auroc)), metric(h.map(|h| h.auprc)));
            let (m_auc, m_ap) = head(r.val.map(|v| v.main));
            let (a_auc, a_ap) = head(r.val.and_then(|v| v.head_a));
            let (b_auc, b_ap) = head(r.val.and_then(|v| v.head_b));
            writeln!(
                s,
                "{},{},{},{},{},{},{},{m_auc},{m_ap},{a_auc},{a_ap},{b_auc},{b_ap},{}",
                r.epoch,
                t.total,
                term(t.s_ab),
                term(t.s_a),
                term(t.s_b),
                term(t.ekd_a),
                term(t.ekd_b),
                r.best_val_auroc
            )
            .expect("write to string");
        }
        s
    }

    /// Per-minibatch loss breakdown CSV.
    pub fn batches_csv(&self) -> String {
        let mut s = String::from("epoch,batch,total,s_AB,s_A,s_B,ekd_A,ekd_B\n");
        for r in &self.batches {
            let t = &r.loss;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.batch,
                t.total,
                term(t.s_ab),
                term(t.s_a),
                term(t.s_b),
                term(t.ekd_a),
                term(t.ekd_b)
            )
            .expect("write to string");
        }
        s
    }

    /// Utilization trace CSV (epoch, u_A, u_B, d_util) followed by the head
    /// AUROCs it was computed from.
    pub fn utilization_csv(&self) -> String {
        let mut s = String::from("epoch,u_A,u_B,d_util,auroc_AB,auroc_A,auroc_B\n");
        for r in &self.utilization {
            writeln!(s, "{},{},{},{},{},{},{}", r.epoch, r.u_a, r.u_b, r.d_util, r.acc_ab, r.acc_a, r.acc_b)
                .expect("write to string");
        }
        s
    }

    /// Mean |d_util| over the sampled epochs.
    pub fn mean_abs_d_util(&self) -> Option<f64> {
        (!self.utilization.is_empty())
            .then(|| self.utilization.iter().map(|r| r.d_util.abs()).sum::<f64>() / self.utilization.len() as f64)
    }
}

fn mean_breakdown(rows: &[BatchRow]) -> LossBreakdown {
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&LossBreakdown) -> Term| {
        let present = rows.iter().any(|r| f(&r.loss).present);
        Term {
            value: if present { rows.iter().map(|r| f(&r.loss).value).sum::<f64>() / n } else { 0.0 },
            present,
        }
    };
    LossBreakdown {
        total: rows.iter().map(|r| r.loss.total).sum::<f64>() / n,
        s_ab: mean(&|b| b.s_ab),
        s_a: mean(&|b| b.s_a),
        s_b: mean(&|b| b.s_b),
        ekd_a: mean(&|b| b.ekd_a),
        ekd_b: mean(&|b| b.ekd_b),
    }
}

fn head_metrics(probs: &Tensor, y: &Tensor) -> HeadMetrics {
    HeadMetrics {
        auroc: metrics::macro_auroc(probs, y).into(),
        auprc: metrics::macro_auprc(probs, y).into(),
    }
}

/// Output of one minibatch step.
struct Step {
    loss: Var,
    breakdown: LossBreakdown,
    params: Vec<Var>,
}

/// The shared epoch loop: shuffle, minibatch, step, Adam, validate,
/// early-stop, keep the best model.
fn fit<M: Parameterized + Clone>(
    mut model: M,
    n_train: usize,
    config: &TrainConfig,
    track_utilization: bool,
    step: impl Fn(&M, &mut Tape, &[usize]) -> Result<Step, TrainError>,
    validate: impl Fn(&M) -> Result<ValRow, TrainError>,
) -> Result<(M, TrainLog), TrainError> {
    config.validate()?;
    let mut adam = AdamState::new(&model.params());
    let mut log = TrainLog {
        epochs: Vec::new(),
        batches: Vec::new(),
        utilization: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
        best_val_auroc: f64::NEG_INFINITY,
    };
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut substream(config.seed, &format!("shuffle:{epoch}")));
        let first_batch_row = log.batches.len();
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::training(derive_seed(config.seed, &format!("dropout:{epoch}:{batch}")));
            let out = step(&model, &mut tape, idx)?;
            if !out.breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch,
                    breakdown: out.breakdown,
                });
            }
            tape.backward(out.loss)?;
            let zeros: Vec<Vec<f64>> = out.params.iter().map(|&v| vec![0.0; tape.value(v).len()]).collect();
            let grads: Vec<&[f64]> = out
                .params
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| tape.grad(v).unwrap_or(z))
                .collect();
            adam_step(&mut model.params_mut(), &grads, &mut adam, config.learning_rate, &config.adam)?;
            log.batches.push(BatchRow {
                epoch,
                batch,
                loss: out.breakdown,
            });
        }
        let train = mean_breakdown(&log.batches[first_batch_row..]);
        let selects = epoch % config.eval_every == 0;
        let samples_util = track_utilization && epoch % config.utilization_every == 0;
        let val = if selects || samples_util { Some(validate(&model)?) } else { None };
        if let Some(v) = val {
            let auroc = v.main.auroc.value().ok_or(TrainError::UndefinedValidation(epoch))?;
            if selects && auroc > log.best_val_auroc {
                log.best_val_auroc = auroc;
                log.best_epoch = epoch;
                best = model.clone();
            }
            if samples_util {
                if let (Some(a), Some(b)) = (v.head_a, v.head_b) {
                    let acc_a = a.auroc.value().ok_or(TrainError::UndefinedValidation(epoch))?;
                    let acc_b = b.auroc.value().ok_or(TrainError::UndefinedValidation(epoch))?;
                    if let Ok(Utilization { u_a, u_b, d_util }) = metrics::utilization(auroc, acc_a, acc_b) {
                        log.utilization.push(UtilizationRow {
                            epoch,
                            acc_ab: auroc,
                            acc_a,
                            acc_b,
                            u_a,
                            u_b,
                            d_util,
                        });
                    }
                }
            }
        }
        log.epochs.push(EpochRow {
            epoch,
            train,
            val,
            best_val_auroc: log.best_val_auroc,
        });
        log.stopped_epoch = epoch;
        if log.best_epoch > 0 && epoch - log.best_epoch >= config.patience {
            break;
        }
    }
    if log.best_epoch == 0 {
        // No evaluation happened (eval_every > epochs run): keep the last model.
        best = model;
        log.best_epoch = log.stopped_epoch;
    }
    Ok((best, log))
}

fn require(split: &Split, name: &'static str, a: bool, b: bool) -> Result<(), TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit(name));
    }
    if a && !split.has_a() {
        return Err(TrainError::MissingModality { split: name, modality: Modality::A });
    }
    if b && !split.has_b() {
        return Err(TrainError::MissingModality { split: name, modality: Modality::B });
    }
    Ok(())
}

fn modality_input(split: &Split, modality: Modality) -> &Tensor {
    match modality {
        Modality::A => split.x_a.as_ref(),
        Modality::B => split.x_b.as_ref(),
    }
    .expect("presence checked")
}

fn batch_input(batch: &Batch, modality: Modality) -> &Tensor {
    match modality {
        Modality::A => batch.x_a.as_ref(),
        Modality::B => batch.x_b.as_ref(),
    }
    .expect("presence checked")
}

/// Trains one unimodal model with the supervised loss only and returns its
/// best-validation checkpoint.
pub fn train_teacher(
    modality: Modality,
    spec: &EncoderSpec,
    task: TaskKind,
    train: &Split,
    val: &Split,
    config: &TrainConfig,
) -> Result<(UnimodalModel, TrainLog), TrainError> {
    let need = (modality == Modality::A, modality == Modality::B);
    require(train, "teacher training", need.0, need.1)?;
    require(val, "teacher validation", need.0, need.1)?;
    let model = UnimodalModel::init(modality, spec, task, config.seed)?;
    let x_train = modality_input(train, modality);
    let x_val = modality_input(val, modality);
    fit(
        model,
        train.len(),
        config,
        false,
        |m, tape, idx| {
            let x = x_train.gather_rows(idx);
            let y = train.y.gather_rows(idx);
            let out = m.forward(tape, &x)?;
            let loss = supervised_loss(tape, out.logits, &y, task)?;
            let v = tape.scalar(loss);
            Ok(Step {
                loss,
                breakdown: LossBreakdown {
                    total: v,
                    s_ab: Term::of(v),
                    ..Default::default()
                },
                params: out.params,
            })
        },
        |m| {
            let probs = m.predict_proba(x_val, 1.0)?;
            Ok(ValRow {
                main: head_metrics(&probs, &val.y),
                head_a: None,
                head_b: None,
            })
        },
    )
}

/// Keeps the `k` candidates with the highest validation AUROC, preferring
/// fewer parameters and then the earlier candidate on exact ties.
pub fn build_ensemble(modality: Modality, candidates: &[(UnimodalModel, f64)], k: usize) -> Result<TeacherEnsemble, TrainError> {
    if k == 0 || candidates.len() < k {
        return Err(TrainError::TooFewCandidates {
            k: k.max(1),
            available: candidates.len(),
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        let (mi, ai) = &candidates[i];
        let (mj, aj) = &candidates[j];
        aj.total_cmp(ai)
            .then(mi.num_params().cmp(&mj.num_params()))
            .then(i.cmp(&j))
    });
    let members = order[..k].iter().map(|&i| candidates[i].0.clone()).collect();
    Ok(TeacherEnsemble::new(modality, members)?)
}

/// Teacher ensembles available to a student run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Teachers<'a> {
    pub a: Option<&'a TeacherEnsemble>,
    pub b: Option<&'a TeacherEnsemble>,
}

fn check_teachers(regime: Regime, w: &LossWeights, t: Teachers<'_>) -> Result<(), TrainError> {
    let (need_a, need_b) = regime.teachers_needed(w);
    for (need, have, modality) in [(need_a, t.a.is_some(), Modality::A), (need_b, t.b.is_some(), Modality::B)] {
        if need && !have {
            return Err(TrainError::MissingTeacher {
                regime: regime.name(),
                row: regime.loss_row(),
                modality,
            });
        }
    }
    Ok(())
}

/// Inference-mode probabilities of all three heads on a split.
pub fn student_probabilities(model: &FusionModel, split: &Split) -> Result<(Tensor, Tensor, Tensor), TrainError> {
    let (x_a, x_b) = (modality_input(split, Modality::A), modality_input(split, Modality::B));
    let (f, a, b) = model.predict(x_a, x_b)?;
    let task = model.task;
    Ok((task.probabilities(&f, 1.0), task.probabilities(&a, 1.0), task.probabilities(&b, 1.0)))
}

/// Trains the fusion student under `config.regime` and returns its
/// best-validation checkpoint. Teachers are only read.
pub fn train_student(
    model: FusionModel,
    teachers: Teachers<'_>,
    train: &Split,
    val: &Split,
    config: &TrainConfig,
) -> Result<(FusionModel, TrainLog), TrainError> {
    let regime = config.regime;
    if regime == Regime::Ume {
        return Err(TrainError::NotTrainable(regime.name()));
    }
    config.validate()?;
    check_teachers(regime, &config.weights, teachers)?;
    require(train, "paired training", true, true)?;
    require(val, "paired validation", true, true)?;
    let task = model.task;
    let w = config.weights;
    let (need_a, need_b) = regime.teachers_needed(&w);
    let targets = |ens: Option<&TeacherEnsemble>, need: bool, x: &Tensor| -> Result<Option<Tensor>, TrainError> {
        match ens {
            Some(e) if need => Ok(Some(e.predict_with_temperature(x, w.tau)?)),
            _ => Ok(None),
        }
    };
    let cached = if config.cache_teacher_outputs {
        Some((
            targets(teachers.a, need_a, modality_input(train, Modality::A))?,
            targets(teachers.b, need_b, modality_input(train, Modality::B))?,
        ))
    } else {
        None
    };
    let heads = regime.has_unimodal_heads();
    fit(
        model,
        train.len(),
        config,
        heads,
        |m, tape, idx| {
            let batch = train.batch(idx);
            let (t_a, t_b) = match &cached {
                Some((a, b)) => (a.as_ref().map(|t| t.gather_rows(idx)), b.as_ref().map(|t| t.gather_rows(idx))),
                None => (
                    targets(teachers.a, need_a, batch_input(&batch, Modality::A))?,
                    targets(teachers.b, need_b, batch_input(&batch, Modality::B))?,
                ),
            };
            let out = m.forward(tape, batch_input(&batch, Modality::A), batch_input(&batch, Modality::B))?;
            let t = TeacherTargets {
                a: t_a.as_ref(),
                b: t_b.as_ref(),
            };
            let (loss, breakdown) = match regime.baseline() {
                Some(b) => baseline_loss(tape, b, &out, &batch.y, t, &w, task)?,
                None => mind_loss(tape, &out, &batch.y, t, &w, task)?,
            };
            Ok(Step {
                loss,
                breakdown,
                params: out.params,
            })
        },
        |m| {
            let (f, a, b) = student_probabilities(m, val)?;
            Ok(ValRow {
                main: head_metrics(&f, &val.y),
                head_a: heads.then(|| head_metrics(&a, &val.y)),
                head_b: heads.then(|| head_metrics(&b, &val.y)),
            })
        },
    )
}

/// Test-set reports for every head a regime produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentReport {
    pub regime: Regime,
    pub fusion: MetricsReport,
    pub head_a: Option<MetricsReport>,
    pub head_b: Option<MetricsReport>,
}

impl StudentReport {
    /// Rows = heads, columns = AUROC/AUPRC with 95% CIs.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("head,auroc,auroc_lo,auroc_hi,auprc,auprc_lo,auprc_hi\n");
        let rows = [("fusion", Some(&self.fusion)), ("A", self.head_a.as_ref()), ("B", self.head_b.as_ref())];
        for (name, r) in rows {
            let Some(r) = r else { continue };
            let ci = |c: Option<metrics::ConfidenceInterval>| match c {
                Some(c) => (c.lo.to_string(), c.hi.to_string()),
                None => (String::new(), String::new()),
            };
            let (al, ah) = ci(r.macro_auroc.ci);
            let (pl, ph) = ci(r.macro_auprc.ci);
            writeln!(s, "{name},{},{al},{ah},{},{pl},{ph}", metric(Some(r.macro_auroc.value)), metric(Some(r.macro_auprc.value)))
                .expect("write to string");
        }
        s
    }

    pub fn all_defined(&self) -> bool {
        self.fusion.all_defined()
            && self.head_a.as_ref().map_or(true, MetricsReport::all_defined)
            && self.head_b.as_ref().map_or(true, MetricsReport::all_defined)
    }
}

pub fn evaluate_student(
    model: &FusionModel,
    regime: Regime,
    split: &Split,
    n_bootstrap: usize,
    seed: u64,
) -> Result<StudentReport, TrainError> {
    require(split, "evaluation", true, true)?;
    let (f, a, b) = student_probabilities(model, split)?;
    let task = model.task;
    let heads = regime.has_unimodal_heads();
    Ok(StudentReport {
        regime,
        fusion: metrics::evaluate(&f, &split.y, task, n_bootstrap, derive_seed(seed, "fusion")),
        head_a: heads.then(|| metrics::evaluate(&a, &split.y, task, n_bootstrap, derive_seed(seed, "A"))),
        head_b: heads.then(|| metrics::evaluate(&b, &split.y, task, n_bootstrap, derive_seed(seed, "B"))),
    })
}

/// Late fusion of two teachers' probabilities; the report has the averaged
/// prediction as its fusion row and each teacher as a unimodal row.
pub fn evaluate_ume(
    teacher_a: &TeacherEnsemble,
    teacher_b: &TeacherEnsemble,
    split: &Split,
    n_bootstrap: usize,
    seed: u64,
) -> Result<StudentReport, TrainError> {
    require(split, "evaluation", true, true)?;
    let p_a = teacher_a.predict(modality_input(split, Modality::A))?;
    let p_b = teacher_b.predict(modality_input(split, Modality::B))?;
    let fused = crate::losses::ume_predict(&p_a, &p_b)?;
    let task = teacher_a.members()[0].task;
    Ok(StudentReport {
        regime: Regime::Ume,
        fusion: metrics::evaluate(&fused, &split.y, task, n_bootstrap, derive_seed(seed, "fusion")),
        head_a: Some(metrics::evaluate(&p_a, &split.y, task, n_bootstrap, derive_seed(seed, "A"))),
        head_b: Some(metrics::evaluate(&p_b, &split.y, task, n_bootstrap, derive_seed(seed, "B"))),
    })
}

/// Test AUROC of a unimodal model on the modality it reads.
pub fn unimodal_auroc(model: &UnimodalModel, split: &Split) -> Result<MetricValue, TrainError> {
    let probs = model.predict_proba(modality_input(split, model.modality), 1.0)?;
    Ok(metrics::macro_auroc(&probs, &split.y).into())
}

/// Weighted-distillation settings compared in the ablation, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationSetting {
    /// Fusion-head supervision only.
    Supervised,
    /// Supervision on all three heads.
    ThreeHeads,
    SingleTeacherUnweighted,
    EnsembleUnweighted,
    SingleTeacherWeighted,
    EnsembleWeighted,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 6] = [
        AblationSetting::Supervised,
        AblationSetting::ThreeHeads,
        AblationSetting::SingleTeacherUnweighted,
        AblationSetting::EnsembleUnweighted,
        AblationSetting::SingleTeacherWeighted,
        AblationSetting::EnsembleWeighted,
    ];

    pub fn number(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed") + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationSetting::Supervised => "supervised fusion head",
            AblationSetting::ThreeHeads => "+ unimodal heads",
            AblationSetting::SingleTeacherUnweighted => "+ single-teacher KD, w=(1,1)",
            AblationSetting::EnsembleUnweighted => "+ ensemble KD, w=(1,1)",
            AblationSetting::SingleTeacherWeighted => "+ single-teacher KD, tuned w",
            AblationSetting::EnsembleWeighted => "+ ensemble KD, tuned w",
        }
    }

    /// Regime, weights and whether ensembles (rather than the single best
    /// teacher) are used.
    pub fn configure(self, tuned: (f64, f64), base: &LossWeights) -> (Regime, LossWeights, bool) {
        let w = |o: (f64, f64)| base.with_omegas(o.0, o.1);
        match self {
            AblationSetting::Supervised => (Regime::Medfuse, *base, false),
            AblationSetting::ThreeHeads => (Regime::Medfuse3h, *base, false),
            AblationSetting::SingleTeacherUnweighted => (Regime::Mind, w((1.0, 1.0)), false),
            AblationSetting::EnsembleUnweighted => (Regime::Mind, w((1.0, 1.0)), true),
            AblationSetting::SingleTeacherWeighted => (Regime::Mind, w(tuned), false),
            AblationSetting::EnsembleWeighted => (Regime::Mind, w(tuned), true),
        }
    }
}

/// Everything a student run needs besides its config.
#[derive(Debug, Clone, Copy)]
pub struct StudentData<'a> {
    pub spec_a: &'a EncoderSpec,
    pub spec_b: &'a EncoderSpec,
    pub task: TaskKind,
    pub train: &'a Split,
    pub val: &'a Split,
    pub test: &'a Split,
}

/// Teachers for the ablation: full ensembles and the single best model per
/// modality (as one-member ensembles).
#[derive(Debug, Clone, Copy)]
pub struct AblationTeachers<'a> {
    pub ensemble_a: &'a TeacherEnsemble,
    pub ensemble_b: &'a TeacherEnsemble,
    pub best_a: &'a TeacherEnsemble,
    pub best_b: &'a TeacherEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model_params: usize,
    pub log: TrainLog,
    pub report: StudentReport,
}

/// Initialises, trains and evaluates one student.
pub fn run_student(
    data: StudentData<'_>,
    teachers: Teachers<'_>,
    config: &TrainConfig,
    n_bootstrap: usize,
) -> Result<(FusionModel, RunResult), TrainError> {
    let model = FusionModel::init(data.spec_a, data.spec_b, data.task, config.seed)?;
    let (model, log) = train_student(model, teachers, data.train, data.val, config)?;
    let report = evaluate_student(&model, config.regime, data.test, n_bootstrap, config.seed)?;
    Ok((
        model.clone(),
        RunResult {
            model_params: model.num_params(),
            log,
            report,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: usize,
    pub label: String,
    pub regime: Regime,
    pub omega: (f64, f64),
    pub ensemble: bool,
    pub result: RunResult,
}

impl AblationRow {
    pub fn fusion_auroc(&self) -> Option<f64> {
        self.result.report.fusion.macro_auroc.value.value()
    }
}

/// Runs the six settings on the same data and seed. Independent settings
/// run in parallel; rows come back in setting order.
pub fn run_ablation(
    data: StudentData<'_>,
    teachers: AblationTeachers<'_>,
    base: &TrainConfig,
    tuned: (f64, f64),
    n_bootstrap: usize,
) -> Result<Vec<AblationRow>, TrainError> {
    AblationSetting::ALL
        .par_iter()
        .map(|&setting| {
            let (regime, weights, ensemble) = setting.configure(tuned, &base.weights);
            let config = TrainConfig {
                regime,
                weights,
                ..base.clone()
            };
            let t = if ensemble {
                Teachers {
                    a: Some(teachers.ensemble_a),
                    b: Some(teachers.ensemble_b),
                }
            } else {
                Teachers {
                    a: Some(teachers.best_a),
                    b: Some(teachers.best_b),
                }
            };
            let (_, result) = run_student(data, t, &config, n_bootstrap)?;
            Ok(AblationRow {
                setting: setting.number(),
                label: setting.label().to_string(),
                regime,
                omega: (weights.omega_a, weights.omega_b),
                ensemble,
                result,
            })
        })
        .collect()
}

/// Ablation table: one row per setting, fusion and per-modality test
/// AUROC/AUPRC. Heads that a setting does not train are left empty.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,label,auroc_AB,auprc_AB,auroc_A,auprc_A,auroc_B,auprc_B\n");
    for r in rows {
        let rep = &r.result.report;
        let pair = |m: Option<&MetricsReport>| {
            (metric(m.map(|m| m.macro_auroc.value)), metric(m.map(|m| m.macro_auprc.value)))
        };
        let (fa, fp) = pair(Some(&rep.fusion));
        let (aa, ap) = pair(rep.head_a.as_ref());
        let (ba, bp) = pair(rep.head_b.as_ref());
        writeln!(s, "{},\"{}\",{fa},{fp},{aa},{ap},{ba},{bp}", r.setting, r.label).expect("write to string");
    }
    s
}

/// The (ω_A, ω_B) pairs of the utilization study.
pub const SWEEP_OMEGAS: [(f64, f64); 6] = [(0.0, 0.0), (1.0, 500.0), (10.0, 100.0), (10.0, 10.0), (100.0, 10.0), (500.0, 1.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: (f64, f64),
    pub result: RunResult,
}

/// MIND students at each ω pair with utilization sampled on the configured
/// cadence.
pub fn utilization_sweep(
    data: StudentData<'_>,
    teachers: Teachers<'_>,
    base: &TrainConfig,
    omegas: &[(f64, f64)],
    n_bootstrap: usize,
) -> Result<Vec<SweepRow>, TrainError> {
    omegas
        .par_iter()
        .map(|&omega| {
            let config = TrainConfig {
                regime: Regime::Mind,
                weights: base.weights.with_omegas(omega.0, omega.1),
                ..base.clone()
            };
            let (_, result) = run_student(data, teachers, &config, n_bootstrap)?;
            Ok(SweepRow { omega, result })
        })
        .collect()
}
