//! Central-difference gradient verification, run in f64.

use super::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub elements: usize,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "grad_check {}: max_rel_err {:.3e} over {} elements -> {}",
            self.op,
            self.max_rel_err,
            self.elements,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Compare tape gradients of a scalar-valued function against central
/// differences (f(x+h) - f(x-h)) / 2h, elementwise over every input.
///
/// Relative error denominator is max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(op: &str, inputs: &[Tensor<f64>], f: F, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &ids);
    assert_eq!(tape.value(root).numel(), 1, "grad_check function must be scalar-valued");
    let grads = tape.backward(root).expect("backward failed in grad_check");

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<ValueId> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let r = f(&mut t, &ids);
        t.value(r).item()
    };

    let mut max_rel_err = 0.0_f64;
    let mut elements = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .cloned()
            .unwrap_or_else(|| input.zeros_like());
        assert_eq!(analytic.shape, input.shape, "gradient shape mismatch for input {i}");
        for e in 0..input.numel() {
            let orig = input.data[e];
            work[i].data[e] = orig + h;
            let fp = eval(&work);
            work[i].data[e] = orig - h;
            let fm = eval(&work);
            work[i].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            elements += 1;
        }
    }
    GradCheckReport {
        op: op.to_string(),
        max_rel_err,
        elements,
        pass: max_rel_err < tol,
    }
}
