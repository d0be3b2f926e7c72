//! Central-difference gradient verification harness.

use super::{Tape, Tensor};
use crate::tensor::NodeId;

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs a scalar loss from a 1 x n leaf holding `point` (slice
/// and reshape it into whatever operands the expression needs). Returns the
/// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradients<F>(mut build: F, point: &[f64], h: f64) -> f64
where
    F: FnMut(&mut Tape, NodeId) -> NodeId,
{
    assert!(!point.is_empty() && h > 0.0);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(point.to_vec()), true);
    let loss = build(&mut tape, x);
    assert_eq!(
        tape.value(loss).numel(),
        1,
        "check_gradients needs a scalar-valued function"
    );
    tape.backward(loss);
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut eval = |p: &[f64]| -> f64 {
        let mut t = Tape::new();
        let leaf = t.leaf(Tensor::vector(p.to_vec()), false);
        let out = build(&mut t, leaf);
        t.value(out).data[0]
    };

    let mut worst = 0.0f64;
    let mut perturbed = point.to_vec();
    for i in 0..point.len() {
        perturbed[i] = point[i] + h;
        let up = eval(&perturbed);
        perturbed[i] = point[i] - h;
        let down = eval(&perturbed);
        perturbed[i] = point[i];
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}
