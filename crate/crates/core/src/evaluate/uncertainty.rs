use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tencore::Tensor;

use crate::dataio::SampleWindow;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::params::Mode;

/// Stochastic forward passes per forecast.
pub const DEFAULT_SAMPLES: usize = 20;
/// Drop probability at every dropout site during sampling.
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtdOptions {
    pub k: usize,
    pub p: f64,
    pub seed: u64,
}

impl Default for TtdOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_SAMPLES,
            p: DEFAULT_DROPOUT,
            seed: 0,
        }
    }
}

impl TtdOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!("test-time dropout needs k >= 2 passes, got {}", self.k)));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::config(format!("dropout probability {} outside [0, 1)", self.p)));
        }
        Ok(())
    }

    /// Seed of each pass, fixed before any pass runs.
    pub fn pass_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.k).map(|_| rng.random()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyResult {
    /// Per-pixel mean of the passes, `[T_out, H, W]`.
    pub mean: Tensor,
    /// Per-pixel unbiased variance, `[T_out, H, W]`.
    pub variance: Tensor,
    /// log10 of the spatial mean variance per lead frame; `None` when that
    /// mean is 0.
    pub summary: Vec<Option<f64>>,
    pub k: usize,
    pub p: f64,
}

/// Mean and unbiased variance of equally shaped samples, per element. Each
/// element's values are sorted first, so the result does not depend on the
/// order of `samples`; a constant column gives its value and 0 exactly.
pub fn pixel_moments(samples: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let k = samples.len();
    if k < 2 {
        return Err(Error::config("moments need at least two samples"));
    }
    let shape = samples[0].shape().to_vec();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::data("samples differ in shape"));
    }
    let n = samples[0].numel();
    let (mut mean, mut var) = (vec![0.0; n], vec![0.0; n]);
    let mut col = vec![0.0; k];
    for i in 0..n {
        for (c, s) in col.iter_mut().zip(samples) {
            *c = s.data()[i];
        }
        col.sort_by(f64::total_cmp);
        let lo = col[0];
        let m = lo + col.iter().map(|v| v - lo).sum::<f64>() / k as f64;
        mean[i] = m;
        var[i] = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (k - 1) as f64;
    }
    Ok((Tensor::new(shape.clone(), mean).expect("shape"), Tensor::new(shape, var).expect("shape")))
}

/// log10 of the mean of each `[H, W]` plane of a `[T, H, W]` map.
pub fn log_mean_per_frame(map: &Tensor) -> Vec<Option<f64>> {
    let s = map.shape();
    let plane = s[1] * s[2];
    map.data()
        .chunks(plane)
        .map(|c| {
            let m = c.iter().sum::<f64>() / plane as f64;
            (m > 0.0).then(|| m.log10())
        })
        .collect()
}

/// Test-time dropout on one input window `x` (`[T_in, H, W]`): `k` forward
/// passes with dropout active at probability `p` and running batch-norm
/// statistics.
pub fn ttd(model: &Model, x: &Tensor, opts: &TtdOptions) -> Result<UncertaintyResult> {
    opts.validate()?;
    if x.rank() != 3 {
        return Err(Error::data(format!("expected one [T, H, W] input window, got {:?}", x.shape())));
    }
    let xb = x.clone().reshape([1, x.shape()[0], x.shape()[1], x.shape()[2]]).expect("same size");
    let mut passes = Vec::with_capacity(opts.k);
    for seed in opts.pass_seeds() {
        let y = model.predict(&xb, Mode::sampling(opts.p), seed)?;
        passes.push(y.index_first(0));
    }
    let (mean, variance) = pixel_moments(&passes)?;
    let summary = log_mean_per_frame(&variance);
    Ok(UncertaintyResult {
        mean,
        variance,
        summary,
        k: opts.k,
        p: opts.p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lead_minutes: u32,
    pub log10_mean_variance: Option<f64>,
}

/// Uncertainty against lead time: the TTD variance maps of all windows are
/// averaged per target frame and summarized as log10 of the spatial mean.
/// `lead_minutes[t]` labels target frame `t`.
pub fn uncertainty_curve(
    model: &Model,
    windows: &[SampleWindow],
    lead_minutes: &[u32],
    opts: &TtdOptions,
) -> Result<Vec<CurvePoint>> {
    let Some(first) = windows.first() else {
        return Err(Error::data("no windows for the uncertainty curve"));
    };
    let frames = first.target.shape()[0];
    if lead_minutes.len() != frames {
        return Err(Error::config(format!(
            "{} lead times for {frames} target frames",
            lead_minutes.len()
        )));
    }
    let mut window_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut total: Option<Tensor> = None;
    for w in windows {
        let o = TtdOptions {
            seed: window_rng.random(),
            ..*opts
        };
        let r = ttd(model, &w.input, &o)?;
        match &mut total {
            None => total = Some(r.variance),
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(r.variance.data()) {
                    *a += b;
                }
            }
        }
    }
    let mut avg = total.expect("at least one window");
    let n = windows.len() as f64;
    for v in avg.data_mut() {
        *v /= n;
    }
    Ok(lead_minutes
        .iter()
        .zip(log_mean_per_frame(&avg))
        .map(|(&lead_minutes, log10_mean_variance)| CurvePoint {
            lead_minutes,
            log10_mean_variance,
        })
        .collect())
}

pub const UNCERTAINTY_HEADER: &str = "lead_minutes,log10_mean_variance,k,dropout_p";

/// CSV of the curve; a missing summary leaves its field empty.
pub fn uncertainty_csv(points: &[CurvePoint], opts: &TtdOptions) -> String {
    let mut out = String::from(UNCERTAINTY_HEADER);
    out.push('\n');
    for pt in points {
        let v = pt.log10_mean_variance.map(|v| v.to_string()).unwrap_or_default();
        out += &format!("{},{v},{},{}\n", pt.lead_minutes, opts.k, opts.p);
    }
    out
}
