use serde::{Deserialize, Serialize};
use tencore::Tensor;

use crate::error::{Error, Result};

/// Rain/cloud decision threshold on normalized values.
pub const THRESHOLD: f64 = 0.5;

/// Pixels strictly above `threshold` are positive.
pub fn binarize(x: &Tensor, threshold: f64) -> Vec<bool> {
    x.data().iter().map(|&v| v > threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(pred: &[bool], target: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return Err(Error::data(format!(
            "prediction mask has {} pixels, target mask {}",
            pred.len(),
            target.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Ratios whose denominator was zero somewhere; they are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Undefined {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl Undefined {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }

    fn merge(&mut self, other: Undefined) {
        self.precision |= other.precision;
        self.recall |= other.recall;
        self.f1 |= other.f1;
    }

    /// `;`-separated names of the undefined ratios, empty when none.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.precision, "precision_undefined"),
            (self.recall, "recall_undefined"),
            (self.f1, "f1_undefined"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        names.join(";")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub undefined: Undefined,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl Scores {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (accuracy, _) = ratio(c.tp + c.tn, c.total());
        let (precision, p_undef) = ratio(c.tp, c.tp + c.fp);
        let (recall, r_undef) = ratio(c.tp, c.tp + c.fn_);
        let (f1, f_undef) = if precision + recall > 0.0 {
            (2.0 * precision * recall / (precision + recall), false)
        } else {
            (0.0, true)
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            undefined: Undefined {
                precision: p_undef,
                recall: r_undef,
                f1: f_undef,
            },
        }
    }
}

/// How classification ratios are aggregated over a test set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// One confusion matrix over every pixel.
    #[default]
    Pooled,
    /// Ratios per `[H, W]` frame, then averaged.
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    /// Number of samples (windows) evaluated.
    pub n: usize,
    pub mse: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub undefined: Undefined,
    pub counts: ConfusionCounts,
}

/// Streams predictions batch by batch into one report.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    threshold: f64,
    averaging: Averaging,
    samples: usize,
    sq_err: f64,
    pixels: u64,
    counts: ConfusionCounts,
    // per-image sums of accuracy, precision, recall, f1 and the frame count
    image_sums: [f64; 4],
    images: usize,
    image_undefined: Undefined,
}

impl MetricsAccumulator {
    pub fn new(threshold: f64, averaging: Averaging) -> Self {
        Self {
            threshold,
            averaging,
            samples: 0,
            sq_err: 0.0,
            pixels: 0,
            counts: ConfusionCounts::default(),
            image_sums: [0.0; 4],
            images: 0,
            image_undefined: Undefined::default(),
        }
    }

    /// Adds a batch. The leading axis counts samples and the last two axes
    /// are image rows and columns.
    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::data(format!(
                "prediction shape {:?} differs from target shape {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let s = pred.shape();
        if s.len() < 3 || pred.numel() == 0 {
            return Err(Error::data(format!("expected [N, .., H, W] maps, got {s:?}")));
        }
        self.samples += s[0];
        self.sq_err += pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        self.pixels += pred.numel() as u64;
        let (pm, tm) = (binarize(pred, self.threshold), binarize(target, self.threshold));
        let plane = s[s.len() - 2] * s[s.len() - 1];
        for (p, t) in pm.chunks(plane).zip(tm.chunks(plane)) {
            let c = confusion(p, t)?;
            self.counts.merge(&c);
            let sc = Scores::from_counts(&c);
            for (acc, v) in self.image_sums.iter_mut().zip([sc.accuracy, sc.precision, sc.recall, sc.f1]) {
                *acc += v;
            }
            self.images += 1;
            self.image_undefined.merge(sc.undefined);
        }
        Ok(())
    }

    pub fn finish(&self, model: &str, dataset: &str) -> Result<MetricsReport> {
        if self.pixels == 0 {
            return Err(Error::data("no predictions to score"));
        }
        let (accuracy, precision, recall, f1, undefined) = match self.averaging {
            Averaging::Pooled => {
                let s = Scores::from_counts(&self.counts);
                (s.accuracy, s.precision, s.recall, s.f1, s.undefined)
            }
            Averaging::PerImage => {
                let n = self.images as f64;
                let [a, p, r, f] = self.image_sums.map(|v| v / n);
                (a, p, r, f, self.image_undefined)
            }
        };
        Ok(MetricsReport {
            model: model.to_string(),
            dataset: dataset.to_string(),
            n: self.samples,
            mse: self.sq_err / self.pixels as f64,
            accuracy,
            precision,
            recall,
            f1,
            undefined,
            counts: self.counts,
        })
    }
}

/// Scores one set of predictions (`[N, .., H, W]`) against its targets,
/// pooling over all pixels.
pub fn metrics(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(threshold, Averaging::Pooled);
    acc.add(pred, target)?;
    acc.finish("", "")
}
