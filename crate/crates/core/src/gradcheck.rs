//! Central finite-difference checks of reverse-mode gradients: one random
//! case per tape op and one per full training objective on a tiny fusion
//! model (latent width 4, batch 3).

use rand::Rng as _;
use rand_distr::StandardNormal;

use thiserror::Error;

use crate::losses::{baseline_loss, mind_loss, BaselineRegime, Divergence, LossError, LossWeights, TeacherTargets};
use crate::nn::{EncoderSpec, FusionModel, NnError, Parameterized, TaskKind};
use crate::rng::{substream, Rng};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Result of one check: the norm-wise relative error
/// `|g - n| / max(|g|, |n|, 1e-8)` between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-8)
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

type Scalar<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'a;

/// Largest relative error over all inputs of a scalar function. Every
/// evaluation uses a fresh training tape with the same seed, so dropout
/// masks repeat.
pub fn check_function(inputs: &[Tensor], f: &Scalar<'_>) -> Result<f64, TensorError> {
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), TensorError> {
        let mut tape = Tape::training(7);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(&x.clone().with_requires_grad(true))).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = eval(inputs)?;
    tape.backward(out)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);
        let mut numeric = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let at = |d: f64| -> Result<f64, TensorError> {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += d;
                let (tape, _, out) = eval(&xs)?;
                Ok(tape.scalar(out))
            };
            numeric.push((at(STEP)? - at(-STEP)?) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Names every op kind; the match is exhaustive so a new op cannot be added
/// without a gradient case.
fn case_inputs(op: &OpKind, rng: &mut Rng) -> Vec<Tensor> {
    match op {
        OpKind::MatMul => vec![normal(&[3, 4], rng), normal(&[4, 2], rng)],
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![normal(&[3, 4], rng), normal(&[3, 4], rng)],
        OpKind::AddBroadcastBias => vec![normal(&[3, 2, 4], rng), normal(&[4], rng)],
        OpKind::ConcatLastAxis => vec![normal(&[3, 2], rng), normal(&[3, 4], rng)],
        OpKind::BceWithLogits => vec![normal(&[3, 4], rng).map(|v| 3.0 * v), uniform(&[3, 4], 0.05, 0.95, rng)],
        OpKind::Sigmoid => vec![normal(&[3, 4], rng).map(|v| 3.0 * v)],
        OpKind::Log => vec![uniform(&[3, 4], 0.2, 3.0, rng)],
        OpKind::MeanOverAxis(_) | OpKind::SumOverAxis(_) | OpKind::SliceTimestep(_) => vec![normal(&[3, 5, 2], rng)],
        OpKind::Scale(_)
        | OpKind::Relu
        | OpKind::Tanh
        | OpKind::SoftmaxWithTemperature(_)
        | OpKind::LogSoftmaxWithTemperature(_)
        | OpKind::Dropout { .. }
        | OpKind::Neg
        | OpKind::Reshape(_) => vec![normal(&[3, 4], rng)],
    }
}

fn op_cases(rng: &mut Rng) -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::AddBroadcastBias,
        OpKind::Mul,
        OpKind::Scale(rng.gen_range(-2.0..2.0)),
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::SoftmaxWithTemperature(1.0),
        OpKind::SoftmaxWithTemperature(rng.gen_range(1.0..4.0)),
        OpKind::LogSoftmaxWithTemperature(1.0),
        OpKind::LogSoftmaxWithTemperature(rng.gen_range(1.0..4.0)),
        OpKind::ConcatLastAxis,
        OpKind::MeanOverAxis(0),
        OpKind::MeanOverAxis(1),
        OpKind::SumOverAxis(2),
        OpKind::SliceTimestep(3),
        OpKind::Dropout { rate: 0.4, seed: rng.gen() },
        OpKind::Log,
        OpKind::Neg,
        OpKind::Reshape(vec![2, 6]),
        OpKind::BceWithLogits,
    ]
}

/// Every tape op at one random point. Each op output is reduced to a scalar
/// through a fixed random weighting so each element carries its own
/// upstream gradient.
pub fn check_ops(seed: u64) -> Result<Vec<GradCheck>, TensorError> {
    let rng = &mut substream(seed, "gradcheck:ops");
    op_cases(rng)
        .into_iter()
        .map(|op| {
            let inputs = case_inputs(&op, rng);
            let mut probe = Tape::training(7);
            let vars: Vec<Var> = inputs.iter().map(|x| probe.leaf(x)).collect();
            let out = probe.forward_op(op.clone(), &vars)?;
            let weights = normal(probe.shape(out), rng);
            let rel_error = check_function(&inputs, &|tape, v| {
                let out = tape.forward_op(op.clone(), v)?;
                let w = tape.constant(weights.clone());
                let weighted = tape.mul(out, w)?;
                tape.sum_all(weighted)
            })?;
            Ok(GradCheck {
                name: op.name().to_string(),
                rel_error,
            })
        })
        .collect()
}

const BATCH: usize = 3;
const LATENT: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Objective {
    Baseline(BaselineRegime),
    Mind,
}

fn check_objective(task: TaskKind, objective: Objective, w: &LossWeights, rng: &mut Rng) -> Result<f64, GradCheckError> {
    let outputs = task.outputs();
    let spec_a = EncoderSpec::mlp(3, &[LATENT], 0.2);
    let spec_b = EncoderSpec::recurrent(2, LATENT, 1, 0.0);
    let mut model = FusionModel::init(&spec_a, &spec_b, task, rng.gen()).expect("valid specs");
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let x_a = normal(&[BATCH, 3], rng);
    let x_b = normal(&[BATCH, 4, 2], rng);
    let mut y = Tensor::zeros(&[BATCH, outputs]);
    for i in 0..BATCH {
        if task.is_multiclass() {
            y.data_mut()[i * outputs + rng.gen_range(0..outputs)] = 1.0;
        } else {
            (0..outputs).for_each(|j| y.data_mut()[i * outputs + j] = f64::from(u8::from(rng.gen_bool(0.5))));
        }
    }
    let t_a = task.probabilities(&normal(&[BATCH, outputs], rng), w.tau);
    let t_b = task.probabilities(&normal(&[BATCH, outputs], rng), w.tau);

    let loss = |m: &FusionModel| -> Result<(Tape, Vec<Var>, Var), GradCheckError> {
        let mut tape = Tape::training(11);
        let out = m.forward(&mut tape, &x_a, &x_b)?;
        let targets = TeacherTargets { a: Some(&t_a), b: Some(&t_b) };
        let (loss, _) = match objective {
            Objective::Baseline(r) => baseline_loss(&mut tape, r, &out, &y, targets, w, task)?,
            Objective::Mind => mind_loss(&mut tape, &out, &y, targets, w, task)?,
        };
        Ok((tape, out.params, loss))
    };
    let (mut tape, vars, l) = loss(&model)?;
    tape.backward(l)?;
    let mut analytic = Vec::new();
    for (&v, p) in vars.iter().zip(model.params()) {
        analytic.extend(tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec));
    }
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (pi, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let at = |d: f64| -> Result<f64, GradCheckError> {
                let mut m = model.clone();
                m.params_mut()[pi].data_mut()[j] += d;
                let (tape, _, l) = loss(&m)?;
                Ok(tape.scalar(l))
            };
            numeric.push((at(STEP)? - at(-STEP)?) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Every training objective (each baseline row and the MIND loss) with
/// respect to all student parameters, for a multilabel task and for a
/// multiclass task under both divergences, at one random point.
pub fn check_losses(seed: u64) -> Result<Vec<GradCheck>, GradCheckError> {
    let rng = &mut substream(seed, "gradcheck:losses");
    let base = LossWeights::default();
    let objectives = [
        (Objective::Baseline(BaselineRegime::Medfuse), base),
        (Objective::Baseline(BaselineRegime::Medfuse3h), base),
        (Objective::Baseline(BaselineRegime::MkeA), LossWeights { gamma: 0.5, ..base }),
        (Objective::Baseline(BaselineRegime::MkeB), LossWeights { gamma: 0.5, ..base }),
        (Objective::Baseline(BaselineRegime::Ts), LossWeights { alpha: 0.3, beta: 0.6, ..base }),
        (Objective::Mind, base.with_omegas(2.0, 0.5)),
    ];
    let mut out = Vec::new();
    for (objective, w) in objectives {
        let name = match objective {
            Objective::Baseline(r) => r.name(),
            Objective::Mind => "mind",
        };
        out.push(GradCheck {
            name: format!("{name}/multilabel"),
            rel_error: check_objective(TaskKind::Multilabel { labels: 2 }, objective, &w, rng)?,
        });
        for divergence in [Divergence::Kl, Divergence::Ce] {
            let w = LossWeights { tau: 2.0, divergence, ..w };
            out.push(GradCheck {
                name: format!("{name}/multiclass-{divergence:?}").to_lowercase(),
                rel_error: check_objective(TaskKind::Multiclass { classes: 3 }, objective, &w, rng)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = relative_error(&[1e3, 0.0], &[1e3 + 1e-3, 0.0]);
        assert!((e - 1e-6).abs() < 1e-11);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx sum(x * x) is 2x; comparing against x must fail.
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let err = relative_error(x.data(), &[1.0, -3.0, 4.0]);
        assert!(err > 0.1);
        let ok = check_function(&[x], &|t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum_all(sq)
        })
        .unwrap();
        assert!(ok < 1e-8);
    }
}
