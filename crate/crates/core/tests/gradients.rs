//! Reverse-mode gradients against central finite differences, for every
//! tape op and every training objective on a tiny fusion model.

use mind_core::gradcheck::{check_losses, check_ops};

const POINTS: u64 = 20;
const TOL: f64 = 1e-5;

const ALL_OPS: [&str; 20] = [
    "matmul",
    "add",
    "sub",
    "add_broadcast_bias",
    "elementwise_mul",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "softmax_with_temperature",
    "log_softmax_with_temperature",
    "concat_last_axis",
    "mean_over_axis",
    "sum_over_axis",
    "slice_timestep",
    "dropout",
    "log",
    "neg",
    "reshape",
    "bce_with_logits",
];

#[test]
fn every_op_matches_finite_differences() {
    for point in 0..POINTS {
        let checks = check_ops(point).unwrap();
        for op in ALL_OPS {
            assert!(checks.iter().any(|c| c.name == op), "no case for {op}");
        }
        for c in checks {
            assert!(c.rel_error <= TOL, "{} at point {point}: relative error {:e}", c.name, c.rel_error);
        }
    }
}

#[test]
fn every_objective_matches_finite_differences() {
    for point in 0..POINTS {
        let checks = check_losses(point).unwrap();
        assert_eq!(checks.len(), 18);
        for c in checks {
            assert!(c.rel_error <= TOL, "{} at point {point}: relative error {:e}", c.name, c.rel_error);
        }
    }
}
