//! Training objectives.
//!
//! Every loss is mean-reduced over batch and outputs so that supervised and
//! distillation terms share a scale. Teacher targets are plain tensors and
//! enter the tape as constants, so no gradient can reach a teacher.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{FusionForward, TaskKind};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_tensor, Tensor, TensorError};

/// Teacher probabilities are clamped into `[TEACHER_CLAMP, 1 - TEACHER_CLAMP]`.
pub const TEACHER_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("targets must be 0 or 1, found {0}")]
    NonBinaryTarget(f64),
    #[error("multiclass targets must be one-hot (row {0})")]
    NotOneHot(usize),
    #[error("{what}: shape {actual:?} does not match logits {expected:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("regime `{regime}` ({row}) needs a teacher for modality {modality}")]
    MissingTeacher {
        regime: &'static str,
        row: &'static str,
        modality: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    #[default]
    Kl,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub omega_a: f64,
    pub omega_b: f64,
    /// Multiclass distillation temperature.
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub divergence: Divergence,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega_a: 1.0,
            omega_b: 1.0,
            tau: 1.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            divergence: Divergence::Kl,
        }
    }
}

impl LossWeights {
    pub fn with_omegas(self, omega_a: f64, omega_b: f64) -> Self {
        Self {
            omega_a,
            omega_b,
            ..self
        }
    }
}

/// One loss component and whether it took part in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Term {
    pub value: f64,
    pub present: bool,
}

impl Term {
    pub fn of(value: f64) -> Self {
        Self { value, present: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub s_ab: Term,
    pub s_a: Term,
    pub s_b: Term,
    /// Distillation towards the modality-A teacher.
    pub ekd_a: Term,
    /// Distillation towards the modality-B teacher.
    pub ekd_b: Term,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 6] {
        [
            self.total,
            self.s_ab.value,
            self.s_a.value,
            self.s_b.value,
            self.ekd_a.value,
            self.ekd_b.value,
        ]
    }
}

fn check_shape(tape: &Tape, logits: Var, what: &'static str, other: &[usize]) -> Result<(), LossError> {
    if tape.shape(logits) != other {
        return Err(LossError::Shape {
            what,
            expected: tape.shape(logits).to_vec(),
            actual: other.to_vec(),
        });
    }
    Ok(())
}

/// BCE per label for binary/multilabel tasks, cross-entropy over classes
/// for multiclass. Mean over batch (and labels).
pub fn supervised_loss(tape: &mut Tape, logits: Var, y: &Tensor, task: TaskKind) -> Result<Var, LossError> {
    check_shape(tape, logits, "labels", y.shape())?;
    if let Some(&bad) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(LossError::NonBinaryTarget(bad));
    }
    if task.is_multiclass() {
        let cols = y.shape()[1];
        if let Some(row) = y.data().chunks(cols).position(|r| r.iter().sum::<f64>() != 1.0) {
            return Err(LossError::NotOneHot(row));
        }
        let y = tape.constant(y.clone());
        soft_cross_entropy(tape, logits, y, 1.0)
    } else {
        let y = tape.constant(y.clone());
        let per_element = tape.bce_with_logits(logits, y)?;
        Ok(tape.mean_all(per_element)?)
    }
}

/// `-mean_batch sum_c p_c log softmax(z / tau)_c`
fn soft_cross_entropy(tape: &mut Tape, logits: Var, target: Var, tau: f64) -> Result<Var, LossError> {
    let log_p = tape.log_softmax(logits, tau)?;
    let weighted = tape.mul(log_p, target)?;
    let per_row = tape.sum_axis(weighted, 1)?;
    let mean = tape.mean_axis(per_row, 0)?;
    Ok(tape.neg(mean)?)
}

/// Binary cross-entropy of the student's sigmoid outputs against teacher
/// probabilities used as soft targets, mean over batch and labels.
pub fn kd_loss_bce(tape: &mut Tape, student_logits: Var, teacher_probs: &Tensor) -> Result<Var, LossError> {
    check_shape(tape, student_logits, "teacher probabilities", teacher_probs.shape())?;
    let target = teacher_probs.map(|p| p.clamp(TEACHER_CLAMP, 1.0 - TEACHER_CLAMP));
    let target = tape.constant(target);
    let per_element = tape.bce_with_logits(student_logits, target)?;
    Ok(tape.mean_all(per_element)?)
}

/// Temperature-scaled multiclass distillation from teacher logits, scaled
/// by `tau^2`.
pub fn kd_loss_multiclass(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    tau: f64,
    divergence: Divergence,
) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let teacher_probs = softmax_tensor(teacher_logits, tau);
    kd_loss_multiclass_probs(tape, student_logits, &teacher_probs, tau, divergence)
}

/// As [`kd_loss_multiclass`], with the (already softened) teacher
/// distribution given directly, e.g. an ensemble average.
pub fn kd_loss_multiclass_probs(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Tensor,
    tau: f64,
    divergence: Divergence,
) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    check_shape(tape, student_logits, "teacher probabilities", teacher_probs.shape())?;
    let target = tape.constant(teacher_probs.clone());
    let ce = soft_cross_entropy(tape, student_logits, target, tau)?;
    let loss = match divergence {
        Divergence::Ce => ce,
        Divergence::Kl => {
            // KL = CE - H(teacher); the entropy is a constant.
            let cols = teacher_probs.shape()[1];
            let rows = teacher_probs.len() / cols;
            let neg_entropy: f64 = teacher_probs
                .data()
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
                / rows as f64;
            let offset = tape.constant(Tensor::scalar(neg_entropy));
            tape.add(ce, offset)?
        }
    };
    Ok(tape.scale(loss, tau * tau)?)
}

/// Distillation of `student_logits` towards `teacher_probs` using the
/// task-appropriate form.
pub fn distillation(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Tensor,
    task: TaskKind,
    w: &LossWeights,
) -> Result<Var, LossError> {
    if task.is_multiclass() {
        kd_loss_multiclass_probs(tape, student_logits, teacher_probs, w.tau, w.divergence)
    } else {
        kd_loss_bce(tape, student_logits, teacher_probs)
    }
}

/// Teacher probabilities available to a loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct TeacherTargets<'a> {
    pub a: Option<&'a Tensor>,
    pub b: Option<&'a Tensor>,
}

/// Supervision on all three heads plus ω-weighted distillation of each
/// unimodal head towards its modality's teacher ensemble. A distillation
/// term whose weight is zero is left out entirely.
pub fn mind_loss(
    tape: &mut Tape,
    out: &FusionForward,
    y: &Tensor,
    teachers: TeacherTargets<'_>,
    w: &LossWeights,
    task: TaskKind,
) -> Result<(Var, LossBreakdown), LossError> {
    let (mut total, mut bd) = three_head_loss(tape, out, y, task)?;
    for (omega, head, target, modality, slot) in [
        (w.omega_a, out.head_a, teachers.a, "A", &mut bd.ekd_a),
        (w.omega_b, out.head_b, teachers.b, "B", &mut bd.ekd_b),
    ] {
        if omega == 0.0 {
            continue;
        }
        let target = target.ok_or(LossError::MissingTeacher {
            regime: "mind",
            row: "L_S_AB + L_S_A + L_S_B + w_A L_EKD_A + w_B L_EKD_B",
            modality,
        })?;
        let kd = distillation(tape, head, target, task, w)?;
        *slot = Term::of(tape.scalar(kd));
        let weighted = tape.scale(kd, omega)?;
        total = tape.add(total, weighted)?;
    }
    bd.total = tape.scalar(total);
    Ok((total, bd))
}

fn three_head_loss(
    tape: &mut Tape,
    out: &FusionForward,
    y: &Tensor,
    task: TaskKind,
) -> Result<(Var, LossBreakdown), LossError> {
    let s_ab = supervised_loss(tape, out.fusion, y, task)?;
    let s_a = supervised_loss(tape, out.head_a, y, task)?;
    let s_b = supervised_loss(tape, out.head_b, y, task)?;
    let partial = tape.add(s_ab, s_a)?;
    let total = tape.add(partial, s_b)?;
    let bd = LossBreakdown {
        total: tape.scalar(total),
        s_ab: Term::of(tape.scalar(s_ab)),
        s_a: Term::of(tape.scalar(s_a)),
        s_b: Term::of(tape.scalar(s_b)),
        ..Default::default()
    };
    Ok((total, bd))
}

/// Loss regimes of the comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineRegime {
    /// Fusion-head supervision only.
    Medfuse,
    /// Supervision on all three heads.
    Medfuse3h,
    /// Fusion head distilled from the modality-A teacher plus γ·L_S_AB.
    MkeA,
    /// Fusion head distilled from the modality-B teacher plus γ·L_S_AB.
    MkeB,
    /// L_S_AB plus α- and β-weighted distillation of the fusion head towards
    /// the A and B teachers.
    Ts,
}

impl BaselineRegime {
    pub fn name(self) -> &'static str {
        match self {
            BaselineRegime::Medfuse => "medfuse",
            BaselineRegime::Medfuse3h => "medfuse3h",
            BaselineRegime::MkeA => "mke_a",
            BaselineRegime::MkeB => "mke_b",
            BaselineRegime::Ts => "ts",
        }
    }

    pub fn loss_row(self) -> &'static str {
        match self {
            BaselineRegime::Medfuse => "L_S_AB",
            BaselineRegime::Medfuse3h => "L_S_AB + L_S_A + L_S_B",
            BaselineRegime::MkeA => "L_KD_A + gamma L_reg",
            BaselineRegime::MkeB => "L_KD_B + gamma L_reg",
            BaselineRegime::Ts => "L_S_AB + alpha L_KD_AB(A) + beta L_KD_AB(B)",
        }
    }
}

pub fn baseline_loss(
    tape: &mut Tape,
    regime: BaselineRegime,
    out: &FusionForward,
    y: &Tensor,
    teachers: TeacherTargets<'_>,
    w: &LossWeights,
    task: TaskKind,
) -> Result<(Var, LossBreakdown), LossError> {
    let missing = |modality| LossError::MissingTeacher {
        regime: regime.name(),
        row: regime.loss_row(),
        modality,
    };
    match regime {
        BaselineRegime::Medfuse => {
            let s_ab = supervised_loss(tape, out.fusion, y, task)?;
            let v = tape.scalar(s_ab);
            Ok((
                s_ab,
                LossBreakdown {
                    total: v,
                    s_ab: Term::of(v),
                    ..Default::default()
                },
            ))
        }
        BaselineRegime::Medfuse3h => three_head_loss(tape, out, y, task),
        BaselineRegime::MkeA | BaselineRegime::MkeB => {
            let (target, modality) = if regime == BaselineRegime::MkeA {
                (teachers.a, "A")
            } else {
                (teachers.b, "B")
            };
            let target = target.ok_or_else(|| missing(modality))?;
            let kd = distillation(tape, out.fusion, target, task, w)?;
            let mut bd = LossBreakdown::default();
            let kd_term = Term::of(tape.scalar(kd));
            if regime == BaselineRegime::MkeA {
                bd.ekd_a = kd_term;
            } else {
                bd.ekd_b = kd_term;
            }
            let total = if w.gamma == 0.0 {
                kd
            } else {
                let reg = supervised_loss(tape, out.fusion, y, task)?;
                bd.s_ab = Term::of(tape.scalar(reg));
                let weighted = tape.scale(reg, w.gamma)?;
                tape.add(kd, weighted)?
            };
            bd.total = tape.scalar(total);
            Ok((total, bd))
        }
        BaselineRegime::Ts => {
            let mut total = supervised_loss(tape, out.fusion, y, task)?;
            let mut bd = LossBreakdown {
                s_ab: Term::of(tape.scalar(total)),
                ..Default::default()
            };
            for (coef, target, modality, slot) in [
                (w.alpha, teachers.a, "A", &mut bd.ekd_a),
                (w.beta, teachers.b, "B", &mut bd.ekd_b),
            ] {
                if coef == 0.0 {
                    continue;
                }
                let target = target.ok_or_else(|| missing(modality))?;
                let kd = distillation(tape, out.fusion, target, task, w)?;
                *slot = Term::of(tape.scalar(kd));
                let weighted = tape.scale(kd, coef)?;
                total = tape.add(total, weighted)?;
            }
            bd.total = tape.scalar(total);
            Ok((total, bd))
        }
    }
}

/// Late-fusion prediction from two unimodal models: the elementwise mean of
/// their probabilities. Nothing is trained.
pub fn ume_predict(probs_a: &Tensor, probs_b: &Tensor) -> Result<Tensor, LossError> {
    if probs_a.shape() != probs_b.shape() {
        return Err(LossError::Shape {
            what: "modality-B probabilities",
            expected: probs_a.shape().to_vec(),
            actual: probs_b.shape().to_vec(),
        });
    }
    Ok(crate::nn::mean_of(&[probs_a.clone(), probs_b.clone()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn scalar_loss(f: impl FnOnce(&mut Tape, Var) -> Result<Var, LossError>, logits: Tensor) -> (f64, Vec<f64>) {
        let mut tape = Tape::training(0);
        let z = tape.leaf(&logits.with_requires_grad(true));
        let loss = f(&mut tape, z).unwrap();
        tape.backward(loss).unwrap();
        (tape.scalar(loss), tape.grad(z).unwrap().to_vec())
    }

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let y = mat(1, 1, &[1.0]);
        let (v, _) = scalar_loss(|t, z| supervised_loss(t, z, &y, TaskKind::Binary), mat(1, 1, &[0.0]));
        assert!((v - LN2).abs() < 1e-15);
        let (v, _) = scalar_loss(|t, z| supervised_loss(t, z, &y, TaskKind::Binary), mat(1, 1, &[60.0]));
        assert!(v < 1e-20);
    }

    #[test]
    fn supervised_rejects_bad_targets() {
        let mut tape = Tape::inference();
        let z = tape.constant(mat(1, 2, &[0.0, 0.0]));
        assert!(matches!(
            supervised_loss(&mut tape, z, &mat(1, 2, &[0.5, 1.0]), TaskKind::Multilabel { labels: 2 }),
            Err(LossError::NonBinaryTarget(_))
        ));
        assert!(matches!(
            supervised_loss(&mut tape, z, &mat(1, 1, &[1.0]), TaskKind::Binary),
            Err(LossError::Shape { .. })
        ));
        assert!(matches!(
            supervised_loss(&mut tape, z, &mat(1, 2, &[1.0, 1.0]), TaskKind::Multiclass { classes: 2 }),
            Err(LossError::NotOneHot(0))
        ));
    }

    #[test]
    fn kd_bce_at_matching_probability() {
        let teacher = mat(1, 1, &[0.5]);
        let (v, g) = scalar_loss(|t, z| kd_loss_bce(t, z, &teacher), mat(1, 1, &[0.0]));
        assert!((v - LN2).abs() < 1e-15);
        assert_eq!(g, vec![0.0]);
        let saturated = mat(1, 1, &[1.0]);
        let (v, _) = scalar_loss(|t, z| kd_loss_bce(t, z, &saturated), mat(1, 1, &[40.0]));
        assert!(v < 1e-5);
    }

    #[test]
    fn kd_bce_gradient_identity() {
        let teacher = mat(2, 2, &[0.1, 0.7, 0.4, 0.95]);
        let logits = [0.3, -1.2, 2.0, 0.0];
        let (_, g) = scalar_loss(|t, z| kd_loss_bce(t, z, &teacher), mat(2, 2, &logits));
        for i in 0..4 {
            let s = 1.0 / (1.0 + (-logits[i]).exp());
            assert!((g[i] - (s - teacher.data()[i]) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_vanishes_on_equal_logits() {
        let teacher = mat(2, 3, &[0.2, -0.4, 1.0, 3.0, 0.0, -1.0]);
        let (v, _) = scalar_loss(
            |t, z| kd_loss_multiclass(t, z, &teacher, 2.0, Divergence::Kl),
            teacher.clone(),
        );
        assert!(v.abs() < 1e-10);
        let other = mat(2, 3, &[5.0, -3.0, 0.0, -2.0, 1.0, 4.0]);
        // Both distributions are near uniform; the divergence itself (before
        // the tau^2 gradient-scale factor) vanishes.
        let tau = 1e6;
        let (v, _) = scalar_loss(|t, z| kd_loss_multiclass(t, z, &teacher, tau, Divergence::Kl), other);
        assert!((v / (tau * tau)).abs() < 1e-10);
    }

    #[test]
    fn multiclass_kd_rejects_bad_temperature() {
        let mut tape = Tape::inference();
        let z = tape.constant(mat(1, 2, &[0.0, 0.0]));
        assert!(matches!(
            kd_loss_multiclass(&mut tape, z, &mat(1, 2, &[0.0, 1.0]), 0.0, Divergence::Kl),
            Err(LossError::Temperature(_))
        ));
    }

    #[test]
    fn ume_is_the_mean() {
        let p = ume_predict(&mat(1, 2, &[0.2, 0.3]), &mat(1, 2, &[0.8, 0.5])).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15 && (p.data()[1] - 0.4).abs() < 1e-15);
        let q = ume_predict(&mat(1, 2, &[0.2, 0.3]), &mat(1, 2, &[0.2, 0.3])).unwrap();
        assert_eq!(q.data(), &[0.2, 0.3]);
        let simplex = ume_predict(&mat(1, 3, &[0.2, 0.3, 0.5]), &mat(1, 3, &[0.6, 0.1, 0.3])).unwrap();
        assert!((simplex.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
