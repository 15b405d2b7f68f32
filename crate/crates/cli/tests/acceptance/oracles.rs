//! Independent reference computations used by the criteria.

use aa_nowcast::models::{ModelConfig, ModelKind};
use aa_nowcast::trainer::MIN_IMPROVEMENT;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tencore::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// Zero-padded cross-correlation by direct summation.
pub fn conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = Tensor::zeros([bs, cout, ho, wo]);
    for n in 0..bs {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy + ky) as isize - pad as isize;
                                let ix = (ox + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[n, o, oy, ox], acc);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- parameter counts

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn dsc_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * k * k + cin + cin * cout + cout
}

fn cbam_count(c: usize, r: usize, k: usize) -> usize {
    let hidden = c / r;
    c * hidden + hidden + hidden * c + c + 2 * k * k
}

fn double_count(cfg: &ModelConfig, cin: usize, cout: usize, separable: bool, attention: bool) -> usize {
    let unit = |a, b| if separable { dsc_count(a, b, 3) } else { conv_count(a, b, 3) };
    let cbam = if attention { cbam_count(cout, cfg.cbam_ratio, cfg.cbam_kernel) } else { 0 };
    unit(cin, cout) + 2 * cout + unit(cout, cout) + 2 * cout + cbam
}

/// Layer-by-layer count; returns (encoder and transformer, decoder).
pub fn param_counts(kind: ModelKind, cfg: &ModelConfig) -> (usize, usize) {
    let aa = kind == ModelKind::AaTransunet;
    let w = &cfg.encoder_widths;
    let stages = w.len() - 1;
    let mut encoder = double_count(cfg, cfg.in_frames, w[0], false, aa);
    for i in 1..w.len() {
        encoder += double_count(cfg, w[i - 1], w[i], false, aa);
    }
    let mut decoder = 0;
    if kind == ModelKind::Unet {
        let mut cin = w[stages];
        for level in (0..stages).rev() {
            decoder += double_count(cfg, cin + w[level], w[level], false, false);
            cin = w[level];
        }
        return (encoder, decoder + conv_count(cin, cfg.out_frames, 1));
    }
    let (d, p) = (cfg.embed_dim, cfg.patch_size);
    let grid = (cfg.image_size >> stages) / p;
    encoder += w[stages] * p * p * d + d + grid * grid * d;
    let hidden = cfg.mlp_ratio * d;
    let layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
    encoder += cfg.depth * layer + 2 * d;

    let dec = &cfg.decoder_widths;
    decoder += if aa { dsc_count(d, dec[0], 3) } else { conv_count(d, dec[0], 3) } + 2 * dec[0];
    let ups = stages + p.trailing_zeros() as usize;
    let mut cin = dec[0];
    for (j, &width) in dec.iter().enumerate() {
        let level = ups - j - 1;
        let skip = if (1..=stages).contains(&level) { w[level] } else { 0 };
        decoder += double_count(cfg, cin + skip, width, aa, aa);
        cin = width;
    }
    (encoder, decoder + conv_count(cin, cfg.out_frames, 1))
}

// ---------------------------------------------------------------- metrics

/// Counts `[tp, fp, tn, fn]` and ratios `[accuracy, precision, recall, f1]`
/// from a 2x2 histogram of (prediction, truth) codes.
pub fn confusion(p: &[f64], q: &[f64]) -> ([u64; 4], [f64; 4]) {
    let mut h = [0u64; 4];
    for i in 0..p.len() {
        h[2 * usize::from(p[i] > 0.5) + usize::from(q[i] > 0.5)] += 1;
    }
    let [tn, fn_, fp, tp] = h;
    let n = p.len() as f64;
    let prec = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let rec = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    ([tp, fp, tn, fn_], [(tp + tn) as f64 / n, prec, rec, f1])
}

// ---------------------------------------------------------------- schedules

/// Learning rate after each epoch and the epoch training stops at, derived
/// from the whole loss prefix rather than incrementally.
pub fn schedule(losses: &[f64], plateau: usize, stop: usize) -> (Vec<f64>, Option<usize>) {
    let mut improved = Vec::new();
    for (i, &l) in losses.iter().enumerate() {
        let last_best = (0..i).rev().find(|&j| improved[j]).map_or(f64::INFINITY, |j| losses[j]);
        improved.push(l < last_best - MIN_IMPROVEMENT);
    }
    let mut lr = 1e-3;
    let mut anchor: Option<usize> = None;
    let mut lrs = Vec::new();
    let mut stop_at = None;
    for i in 0..losses.len() {
        if improved[i] {
            anchor = Some(i);
        } else {
            let since = i - anchor.unwrap_or(0) + usize::from(anchor.is_none());
            if since >= plateau {
                lr *= 0.1;
                anchor = Some(i);
            }
        }
        lrs.push(lr);
        let stale = (0..=i).rev().find(|&j| improved[j]).map_or(i + 1, |j| i - j);
        if stop_at.is_none() && stale >= stop {
            stop_at = Some(i);
        }
    }
    (lrs, stop_at)
}

/// Losses realising an improvement pattern; stale epochs cycle through
/// ties, regressions and gains below the tolerance.
pub fn losses_for(pattern: &[bool]) -> Vec<f64> {
    let mut best: f64 = 1.0;
    pattern
        .iter()
        .enumerate()
        .map(|(i, &up)| {
            if up || i == 0 {
                best -= 0.01;
                best
            } else {
                match i % 3 {
                    0 => best,
                    1 => best + 0.2,
                    _ => best - 0.5 * MIN_IMPROVEMENT,
                }
            }
        })
        .collect()
}
