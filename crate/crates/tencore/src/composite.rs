//! Ops assembled from tape primitives.

use crate::error::{config, Result};
use crate::tape::{NormLayout, Tape, Var};

impl Tape {
    /// Normalises over the last axis, then applies `gamma`/`beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self
            .try_value(x)?
            .shape()
            .last()
            .ok_or_else(|| config("layer_norm", "input must have rank >= 1"))?;
        for p in [gamma, beta] {
            if self.try_value(p)?.shape() != [d] {
                return Err(config(
                    "layer_norm",
                    format!("affine parameters must be [{d}], got {:?}", self.shape(p)),
                ));
            }
        }
        let (xhat, _) = self.standardize(x, NormLayout::Chunks { size: d }, eps)?;
        let scaled = self.mul(xhat, gamma)?;
        self.add(scaled, beta)
    }

    /// `x · w + b` over the last axis, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}
