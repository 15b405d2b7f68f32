use crate::dataio::{batch, SampleWindow};
use crate::error::{Error, Result};
use crate::models::{persistence, Model};

use super::metrics::{Averaging, MetricsAccumulator, MetricsReport, THRESHOLD};

pub const PERSISTENCE: &str = "persistence";

/// Something that maps an input batch to a forecast batch.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model { name: &'a str, model: &'a Model },
    /// Repeats the last observed frame.
    Persistence,
}

impl Predictor<'_> {
    pub fn name(&self) -> &str {
        match self {
            Predictor::Model { name, .. } => name,
            Predictor::Persistence => PERSISTENCE,
        }
    }

    pub fn predict(&self, x: &tencore::Tensor, out_frames: usize) -> Result<tencore::Tensor> {
        match self {
            Predictor::Model { model, .. } => model.infer(x),
            Predictor::Persistence => persistence(x, out_frames),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub averaging: Averaging,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: THRESHOLD,
            averaging: Averaging::Pooled,
            batch_size: 8,
        }
    }
}

/// One report per predictor over `windows`. A persistence row is appended
/// when none was given.
pub fn evaluate_models(
    predictors: &[Predictor],
    windows: &[SampleWindow],
    dataset: &str,
    opts: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    let Some(first) = windows.first() else {
        return Err(Error::data(format!("no test windows in {dataset}")));
    };
    let (t_in, t_out) = (first.input.shape()[0], first.target.shape()[0]);
    let mut all = predictors.to_vec();
    if !all.iter().any(|p| matches!(p, Predictor::Persistence)) {
        all.push(Predictor::Persistence);
    }
    let mut reports = Vec::with_capacity(all.len());
    for p in &all {
        if let Predictor::Model { name, model } = p {
            let c = model.config();
            if c.in_frames != t_in || c.out_frames != t_out {
                return Err(Error::data(format!(
                    "{name} maps {} frames to {}, test windows have {t_in} and {t_out}",
                    c.in_frames, c.out_frames
                )));
            }
        }
        let mut acc = MetricsAccumulator::new(opts.threshold, opts.averaging);
        for chunk in windows.chunks(opts.batch_size.max(1)) {
            let refs: Vec<&SampleWindow> = chunk.iter().collect();
            let (x, y) = batch(&refs)?;
            let pred = p.predict(&x, t_out)?;
            acc.add(&pred, &y)?;
        }
        reports.push(acc.finish(p.name(), dataset)?);
    }
    Ok(reports)
}

pub const METRICS_HEADER: &str = "model,dataset,n,mse,accuracy,precision,recall,f1,flags";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        out += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            csv_field(&r.model),
            csv_field(&r.dataset),
            r.n,
            r.mse,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1,
            r.undefined.label()
        );
    }
    out
}

/// Fixed-width table with the best value of each column marked `*`
/// (lowest MSE, highest otherwise).
pub fn render_table(reports: &[MetricsReport]) -> String {
    let cols: [(&str, fn(&MetricsReport) -> f64, bool); 5] = [
        ("MSE", |r| r.mse, false),
        ("Accuracy", |r| r.accuracy, true),
        ("Precision", |r| r.precision, true),
        ("Recall", |r| r.recall, true),
        ("F1", |r| r.f1, true),
    ];
    let name_w = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<name_w$}", "Model");
    for (h, _, _) in &cols {
        out += &format!(" {h:>11}");
    }
    out.push('\n');
    for r in reports {
        out += &format!("{:<name_w$}", r.model);
        for (_, get, higher) in &cols {
            let v = get(r);
            let best = reports.iter().all(|o| if *higher { get(o) <= v } else { get(o) >= v });
            let cell = format!("{v:.4}{}", if best { "*" } else { " " });
            out += &format!(" {cell:>11}");
        }
        out.push('\n');
    }
    out
}
