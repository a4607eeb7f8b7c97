//! Invariants of the metrics, losses, ensemble averaging, optimizer and
//! file formats, checked on random inputs.

use mind_core::data::{decode, encode, generate};
use mind_core::losses::{baseline_loss, kd_loss_bce, kd_loss_multiclass, mind_loss, BaselineRegime, TeacherTargets};
use mind_core::metrics::{auprc, auroc, bootstrap_ci, macro_auroc, utilization};
use mind_core::nn::{mean_of, Parameterized};
use mind_core::trainer::{adam_step, AdamConfig, AdamState};
use mind_core::{Divergence, EncoderSpec, FusionModel, GeneratorConfig, LossWeights, Modality, Tape, TaskKind, TeacherEnsemble, Tensor, UnimodalModel};
use proptest::prelude::*;

/// Scores drawn from a small grid so ties are common.
fn scored_labels(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..=max_n)
        .prop_flat_map(|n| (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n)))
        .prop_map(|(s, l)| (s.into_iter().map(|v| f64::from(v) / 11.0).collect(), l))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
}

fn distinct_scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60)
        .prop_flat_map(|n| (Just(n), prop::collection::vec(any::<bool>(), n), any::<u64>()))
        .prop_map(|(n, l, seed)| {
            let mut s: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let mut rng = mind_core::rng::seeded_rng(seed);
            rand::seq::SliceRandom::shuffle(s.as_mut_slice(), &mut rng);
            (s, l)
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
}

fn pairwise_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in s.iter().enumerate().filter(|&(i, _)| l[i]) {
        for (j, &sj) in s.iter().enumerate().filter(|&(j, _)| !l[j]) {
            let _ = (i, j);
            pairs += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_matches_pairwise_count((s, l) in scored_labels(80)) {
        prop_assert_eq!(auroc(&s, &l).unwrap(), pairwise_auroc(&s, &l));
    }

    #[test]
    fn auroc_invariant_under_monotone_maps((s, l) in scored_labels(80), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = auroc(&s, &l).unwrap();
        let affine: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let cubed: Vec<f64> = s.iter().map(|v| (v - 0.3).powi(3)).collect();
        prop_assert_eq!(auroc(&affine, &l).unwrap(), base);
        prop_assert_eq!(auroc(&cubed, &l).unwrap(), base);
    }

    #[test]
    fn auroc_of_negated_scores_is_complement((s, l) in distinct_scored_labels()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_lie_in_unit_interval((s, l) in scored_labels(80)) {
        let a = auroc(&s, &l).unwrap();
        let p = auprc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn bootstrap_interval_is_ordered_and_reproducible((s, l) in scored_labels(40), seed in any::<u64>()) {
        let a = bootstrap_ci(auroc, &s, &l, 50, seed).unwrap();
        let b = bootstrap_ci(auroc, &s, &l, 50, seed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.lo <= a.hi);
    }

    #[test]
    fn utilization_difference_is_bounded(ab in 0.5f64..1.0, da in -0.5f64..0.5, db in -0.5f64..0.5) {
        let (acc_a, acc_b) = ((ab + da).clamp(0.0, 1.0), (ab + db).clamp(0.0, 1.0));
        let u = utilization(ab, acc_a, acc_b).unwrap();
        prop_assert_eq!(u.d_util, u.u_a - u.u_b);
        prop_assert!((u.d_util - (acc_a - acc_b) / ab).abs() < 1e-12);
        if (acc_a - acc_b).abs() <= ab {
            prop_assert!(u.d_util.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn macro_auroc_averages_defined_labels(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = mind_core::rng::seeded_rng(seed);
        let (n, k) = (30, 4);
        let mut y: Vec<f64> = (0..n * k).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        for i in 0..n {
            y[i * k + 3] = 1.0; // label 3 is degenerate
        }
        let p: Vec<f64> = (0..n * k).map(|_| rng.gen()).collect();
        let (y, p) = (Tensor::new(vec![n, k], y).unwrap(), Tensor::new(vec![n, k], p).unwrap());
        let defined: Vec<f64> = (0..k)
            .filter_map(|j| {
                let labels: Vec<bool> = y.column(j).iter().map(|&v| v == 1.0).collect();
                auroc(&p.column(j), &labels).ok()
            })
            .collect();
        prop_assert_eq!(defined.len(), 3);
        let expected = defined.iter().sum::<f64>() / 3.0;
        prop_assert!((macro_auroc(&p, &y).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn ensemble_mean_is_order_free_and_inside_hull(
        parts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..6),
        rot in 0usize..6,
    ) {
        let tensors: Vec<Tensor> = parts.iter().map(|p| Tensor::new(vec![2, 3], p.clone()).unwrap()).collect();
        let mean = mean_of(&tensors);
        let mut permuted = tensors.clone();
        let r = rot % permuted.len();
        permuted.rotate_left(r);
        permuted.reverse();
        let other = mean_of(&permuted);
        prop_assert_eq!(mean.data(), other.data());
        for i in 0..6 {
            let lo = parts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
            let hi = parts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mean.data()[i] >= lo && mean.data()[i] <= hi);
        }
    }

    #[test]
    fn bce_distillation_is_smallest_at_teacher(p in 0.02f64..0.98, dz in 0.05f64..2.0) {
        let at = |z: f64| {
            let mut tape = Tape::inference();
            let v = tape.constant(Tensor::new(vec![1, 1], vec![z]).unwrap());
            let l = kd_loss_bce(&mut tape, v, &Tensor::new(vec![1, 1], vec![p]).unwrap()).unwrap();
            tape.scalar(l)
        };
        let z = (p / (1.0 - p)).ln();
        prop_assert!(at(z) < at(z + dz));
        prop_assert!(at(z) < at(z - dz));
    }

    #[test]
    fn multiclass_kl_is_non_negative(
        s in prop::collection::vec(-4.0f64..4.0, 4),
        t in prop::collection::vec(-4.0f64..4.0, 4),
        tau in 1.0f64..8.0,
    ) {
        let mut tape = Tape::inference();
        let v = tape.constant(Tensor::new(vec![1, 4], s).unwrap());
        let l = kd_loss_multiclass(&mut tape, v, &Tensor::new(vec![1, 4], t).unwrap(), tau, Divergence::Kl).unwrap();
        prop_assert!(tape.scalar(l) >= -1e-12);
    }

    #[test]
    fn mind_loss_is_affine_in_omega(seed in 0u64..1000, wa in 0.0f64..50.0, wb in 0.0f64..50.0) {
        let (model, x_a, x_b, y, t_a, t_b) = tiny_setup(seed);
        let run = |w: LossWeights, regime: Option<BaselineRegime>| {
            let mut tape = Tape::inference();
            let out = model.forward(&mut tape, &x_a, &x_b).unwrap();
            let t = TeacherTargets { a: Some(&t_a), b: Some(&t_b) };
            match regime {
                None => mind_loss(&mut tape, &out, &y, t, &w, TASK).unwrap().1,
                Some(r) => baseline_loss(&mut tape, r, &out, &y, t, &w, TASK).unwrap().1,
            }
        };
        let w = LossWeights::default().with_omegas(wa, wb);
        let bd = run(w, None);
        let base = run(w, Some(BaselineRegime::Medfuse3h));
        let predicted = base.total + wa * bd.ekd_a.value + wb * bd.ekd_b.value;
        prop_assert!((bd.total - predicted).abs() <= 1e-12 * bd.total.abs().max(1.0));
        let zero = run(w.with_omegas(0.0, 0.0), None);
        prop_assert_eq!(zero.total.to_bits(), base.total.to_bits());
        prop_assert!(!zero.ekd_a.present && !zero.ekd_b.present);
    }

    #[test]
    fn adam_updates_each_parameter_independently(
        g in prop::collection::vec(-5.0f64..5.0, 6),
        j in 0usize..6,
        bump in -3.0f64..3.0,
    ) {
        let step = |g: &[f64]| {
            let mut p = Tensor::new(vec![6], vec![0.5; 6]).unwrap().with_requires_grad(true);
            let mut st = AdamState::new(&[&p]);
            for _ in 0..3 {
                adam_step(&mut [&mut p], &[g], &mut st, 0.01, &AdamConfig::default()).unwrap();
            }
            p.into_data()
        };
        let mut h = g.clone();
        h[j] += bump;
        let (a, b) = (step(&g), step(&h));
        for i in (0..6).filter(|&i| i != j) {
            prop_assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }

    #[test]
    fn dataset_round_trips(seed in any::<u64>(), n in 0usize..6, multiclass in any::<bool>()) {
        let config = GeneratorConfig {
            task: if multiclass { TaskKind::Multiclass { classes: 3 } } else { TaskKind::Multilabel { labels: 2 } },
            n_unimodal_a: n + 3,
            n_unimodal_b: n + 4,
            n_paired_train: 3,
            n_val: 2,
            n_test: n,
            latent_dim: 4,
            dim_a: 5,
            dim_b: 2,
            seq_len: 6,
            window: 3,
            seed,
            ..GeneratorConfig::default()
        };
        let ds = generate(&config).unwrap();
        let bytes = encode(&ds);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        prop_assert_eq!(back, ds);
    }
}

const TASK: TaskKind = TaskKind::Multilabel { labels: 3 };

type Setup = (FusionModel, Tensor, Tensor, Tensor, Tensor, Tensor);

fn tiny_setup(seed: u64) -> Setup {
    use rand::Rng;
    let mut rng = mind_core::rng::seeded_rng(seed);
    let mut r = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let model = FusionModel::init(&EncoderSpec::mlp(3, &[4], 0.0), &EncoderSpec::recurrent(2, 4, 1, 0.0), TASK, seed).unwrap();
    let (x_a, x_b) = (r(&[5, 3]), r(&[5, 3, 2]));
    let y = r(&[5, 3]).map(|v| f64::from(u8::from(v > 0.0)));
    let (t_a, t_b) = (r(&[5, 3]).map(|v| 0.5 + 0.45 * v), r(&[5, 3]).map(|v| 0.5 + 0.45 * v));
    (model, x_a, x_b, y, t_a, t_b)
}

#[test]
fn ts_without_teacher_weights_is_medfuse() {
    for seed in 0..20 {
        let (model, x_a, x_b, y, t_a, t_b) = tiny_setup(seed);
        let run = |r: BaselineRegime, w: LossWeights| {
            let mut tape = Tape::inference();
            let out = model.forward(&mut tape, &x_a, &x_b).unwrap();
            let t = TeacherTargets { a: Some(&t_a), b: Some(&t_b) };
            baseline_loss(&mut tape, r, &out, &y, t, &w, TASK).unwrap().1.total
        };
        let w = LossWeights { alpha: 0.0, beta: 0.0, ..Default::default() };
        assert_eq!(run(BaselineRegime::Ts, w).to_bits(), run(BaselineRegime::Medfuse, w).to_bits());
    }
}

#[test]
fn ensemble_targets_carry_no_gradient() {
    let spec = EncoderSpec::mlp(3, &[4], 0.0);
    let members: Vec<UnimodalModel> = (0..3).map(|s| UnimodalModel::init(Modality::A, &spec, TASK, s).unwrap()).collect();
    let ens = TeacherEnsemble::new(Modality::A, members).unwrap();
    assert!(ens.members().iter().all(|m| m.is_frozen()));
    let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.7]).unwrap();
    let p = ens.predict(&x).unwrap();
    let probs: Vec<Tensor> = ens.members().iter().map(|m| m.predict_proba(&x, 1.0).unwrap()).collect();
    for (i, v) in p.data().iter().enumerate() {
        let naive = probs.iter().map(|q| q.data()[i]).sum::<f64>() / 3.0;
        assert!((v - naive).abs() <= 1e-15);
    }
    assert!(!p.requires_grad());
}
