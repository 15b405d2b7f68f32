//! Finite-difference verification of gradients with respect to stored
//! parameters.

use tencore::check::rel_error;
use tencore::Var;

use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamStore};

/// One checked scalar.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    /// Central difference.
    pub numeric: f64,
    /// One-sided differences `(f(x+h) - f(x)) / h` and `(f(x) - f(x-h)) / h`.
    pub forward: f64,
    pub backward: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        rel_error(self.analytic, self.numeric)
    }

    /// Whether the one-sided slopes disagree by more than `tol` (relative),
    /// meaning `[x-h, x+h]` straddles a relu or max-pool switch point and
    /// the central difference is not a valid reference.
    pub fn crosses_kink(&self, tol: f64) -> bool {
        rel_error(self.forward, self.backward) > tol
    }
}

/// Compares tape gradients of the scalar built by `loss` against central
/// differences at the `(parameter position, element)` pairs in `samples`.
/// Every evaluation uses the same `mode` and dropout `seed`.
pub fn check_param_gradients(
    params: &ParamStore,
    buffers: &ParamStore,
    mode: Mode,
    seed: u64,
    samples: &[(usize, usize)],
    h: f64,
    loss: impl Fn(&mut Ctx) -> Result<Var>,
) -> Result<Vec<GradSample>> {
    let (base, grads) = {
        let mut ctx = Ctx::new(params, buffers, mode, seed);
        let l = loss(&mut ctx)?;
        let base = ctx.value(l).item().ok_or_else(|| Error::config("loss is not a scalar"))?;
        (base, ctx.gradients(l)?)
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(p, buffers, mode, seed);
        let l = loss(&mut ctx)?;
        ctx.value(l)
            .item()
            .ok_or_else(|| Error::config("loss is not a scalar"))
    };
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(samples.len());
    for &(pi, ei) in samples {
        let orig = probe.tensor(pi).data()[ei];
        probe.tensor_mut(pi).data_mut()[ei] = orig + h;
        let up = eval(&probe)?;
        probe.tensor_mut(pi).data_mut()[ei] = orig - h;
        let down = eval(&probe)?;
        probe.tensor_mut(pi).data_mut()[ei] = orig;
        out.push(GradSample {
            path: params.name(pi).to_string(),
            index: ei,
            analytic: grads[pi].data()[ei],
            numeric: (up - down) / (2.0 * h),
            forward: (up - base) / h,
            backward: (base - down) / h,
        });
    }
    Ok(out)
}

/// Every element of every parameter.
pub fn all_elements(params: &ParamStore) -> Vec<(usize, usize)> {
    (0..params.len())
        .flat_map(|p| (0..params.tensor(p).numel()).map(move |e| (p, e)))
        .collect()
}
