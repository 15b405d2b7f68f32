//! Finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so these helpers stay independent
//! of the backward rules they are meant to verify.

use crate::tensor::Tensor;

/// Default step for central differences at 64-bit precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Absolute floor used in [`rel_error`] so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Central-difference derivative of `f` w.r.t. element `index` of `x`.
pub fn central_difference(f: &mut impl FnMut(&Tensor) -> f64, x: &Tensor, index: usize, h: f64) -> f64 {
    let mut probe = x.clone();
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + h;
    let up = f(&probe);
    probe.data_mut()[index] = orig - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Full numerical gradient of `f` at `x`.
pub fn numerical_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let data = (0..x.numel())
        .map(|i| central_difference(&mut f, x, i, h))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape as input")
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of a scalar-valued graph against central
/// differences for every element of every input. Returns the largest
/// [`rel_error`] seen.
pub fn gradient_check(
    inputs: &[Tensor],
    build: impl Fn(&mut crate::Tape, &[crate::Var]) -> crate::Result<crate::Var>,
    h: f64,
) -> crate::Result<f64> {
    let mut tape = crate::Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient for every input");
        let mut eval = |probe: &Tensor| {
            let mut t = crate::Tape::new();
            let vs: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| t.constant(if i == slot { probe.clone() } else { x.clone() }))
                .collect();
            let out = build(&mut t, &vs).expect("forward succeeded once already");
            t.value(out).item().expect("scalar loss")
        };
        for i in 0..inputs[slot].numel() {
            let numeric = central_difference(&mut eval, &inputs[slot], i, h);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
