use std::fmt::Write as _;

use super::net::Model;

/// Reference decoder totals reported for the full-size models.
pub const REFERENCE_TRANSUNET_DECODER: &str = "~2.93M";
pub const REFERENCE_AA_DECODER: &str = "~0.91M";
pub const REFERENCE_REDUCTION_PERCENT: f64 = 68.94;

/// Exact parameter counts read from a model's stored arrays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub per_path: Vec<(String, usize)>,
    /// Everything outside the decoder: CNN stages and transformer.
    pub encoder: usize,
    pub decoder: usize,
    /// Decoder attention modules only.
    pub decoder_cbam: usize,
    /// Decoder minus its attention modules.
    pub decoder_conv: usize,
    /// Attention modules anywhere in the network.
    pub cbam: usize,
    pub total: usize,
}

fn is_cbam(path: &str) -> bool {
    path.split('.').any(|seg| seg == "cbam")
}

impl ParamReport {
    pub fn of(model: &Model) -> Self {
        let per_path: Vec<(String, usize)> = model
            .params()
            .iter()
            .map(|(p, t)| (p.to_string(), t.numel()))
            .collect();
        let sum = |pred: &dyn Fn(&str) -> bool| -> usize {
            per_path.iter().filter(|(p, _)| pred(p)).map(|(_, n)| n).sum()
        };
        let in_decoder = |p: &str| p.starts_with("decoder.");
        let decoder = sum(&in_decoder);
        let decoder_cbam = sum(&|p| in_decoder(p) && is_cbam(p));
        let total = sum(&|_| true);
        Self {
            encoder: total - decoder,
            decoder,
            decoder_cbam,
            decoder_conv: decoder - decoder_cbam,
            cbam: sum(&|p| is_cbam(p)),
            total,
            per_path,
        }
    }

    /// Percentage by which `self`'s decoder is smaller than `baseline`'s.
    pub fn decoder_reduction_percent(&self, baseline: &ParamReport) -> f64 {
        100.0 * (1.0 - self.decoder as f64 / baseline.decoder as f64)
    }

    /// `group,count` rows: aggregates first, then every path.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,count\n");
        for (name, n) in [
            ("encoder", self.encoder),
            ("decoder", self.decoder),
            ("decoder_cbam", self.decoder_cbam),
            ("decoder_conv", self.decoder_conv),
            ("cbam", self.cbam),
            ("total", self.total),
        ] {
            let _ = writeln!(out, "{name},{n}");
        }
        for (p, n) in &self.per_path {
            let _ = writeln!(out, "{p},{n}");
        }
        out
    }
}

/// Human-readable count such as `2.93M` or `8.96K`.
pub fn human_count(n: usize) -> String {
    match n {
        n if n >= 1_000_000 => format!("{:.2}M", n as f64 / 1e6),
        n if n >= 1_000 => format!("{:.2}K", n as f64 / 1e3),
        n => n.to_string(),
    }
}
