//! Hot paths of training and evaluation: dense matmul through the tape, one
//! student step (forward, loss, backward), AUROC, bootstrap and data
//! generation.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mind_core::data::generate;
use mind_core::losses::{mind_loss, TeacherTargets};
use mind_core::metrics::{auroc, bootstrap_ci};
use mind_core::rng::seeded_rng;
use mind_core::{EncoderSpec, FusionModel, GeneratorConfig, LossWeights, Modality, Tape, TeacherEnsemble, Tensor, UnimodalModel};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2).with_requires_grad(true));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::training(0);
                let (va, vb) = (tape.constant(a.clone()), tape.leaf(&b));
                let out = tape.matmul(va, vb).unwrap();
                let loss = tape.sum_all(out).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.grad(vb).map(|g| g[0]))
            })
        });
    }
    group.finish();
}

fn student_step(c: &mut Criterion) {
    let config = GeneratorConfig::default();
    let task = config.task;
    let (spec_a, spec_b) = (EncoderSpec::mlp(config.dim_a, &[32], 0.0), EncoderSpec::recurrent(config.dim_b, 32, 1, 0.0));
    let model = FusionModel::init(&spec_a, &spec_b, task, 0).unwrap();
    let batch = 16;
    let x_a = random(&[batch, config.dim_a], 3);
    let x_b = random(&[batch, config.seq_len, config.dim_b], 4);
    let y = random(&[batch, task.outputs()], 5).map(|v| f64::from(u8::from(v > 0.0)));
    let teacher = |m, spec: &EncoderSpec| {
        let members = (0..3).map(|s| UnimodalModel::init(m, spec, task, s).unwrap()).collect();
        TeacherEnsemble::new(m, members).unwrap()
    };
    let t_a = teacher(Modality::A, &spec_a).predict(&x_a).unwrap();
    let t_b = teacher(Modality::B, &spec_b).predict(&x_b).unwrap();
    let w = LossWeights::default().with_omegas(10.0, 10.0);
    c.bench_function("student_step/batch16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::training(1);
            let out = model.forward(&mut tape, &x_a, &x_b).unwrap();
            let t = TeacherTargets { a: Some(&t_a), b: Some(&t_b) };
            let (loss, bd) = mind_loss(&mut tape, &out, &y, t, &w, task).unwrap();
            tape.backward(loss).unwrap();
            black_box(bd.total)
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = seeded_rng(7);
    let n = 1000;
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| rng.gen::<f64>() + if l { 0.3 } else { 0.0 }).collect();
    c.bench_function("auroc/n1000", |bench| bench.iter(|| black_box(auroc(&scores, &labels).unwrap())));
    c.bench_function("bootstrap_auroc/n1000x200", |bench| {
        bench.iter(|| black_box(bootstrap_ci(auroc, &scores, &labels, 200, 3).unwrap()))
    });
}

fn data_generation(c: &mut Criterion) {
    let config = GeneratorConfig {
        n_unimodal_a: 1000,
        n_unimodal_b: 1000,
        n_paired_train: 200,
        n_val: 100,
        n_test: 100,
        ..GeneratorConfig::default()
    };
    c.bench_function("generate/2400", |bench| bench.iter(|| black_box(generate(&config).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, student_step, metrics, data_generation
}
criterion_main!(benches);
