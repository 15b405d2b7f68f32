//! MSE training with Adam, a reduce-on-plateau schedule and early stopping.

mod optim;
mod schedule;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tencore::{Tensor, TensorError};

pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{Decision, EarlyStopper, PlateauScheduler, MIN_IMPROVEMENT};

use crate::dataio::{batch, SampleWindow};
use crate::error::{AtPath, Error, Result};
use crate::models::Model;
use crate::params::{Mode, ParamStore};

pub const RUN_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::precipitation()
    }
}

impl TrainConfig {
    pub fn precipitation() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 6,
            lr: 1e-3,
            plateau_patience: 4,
            plateau_factor: 0.1,
            early_stop_patience: 20,
            seed: 0,
            loss: Loss::Mse,
        }
    }

    pub fn cloud() -> Self {
        Self {
            max_epochs: 100,
            ..Self::precipitation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(format!("plateau factor {} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.plateau_patience >= self.early_stop_patience {
            return fail(format!(
                "need 0 < plateau patience ({}) < early-stop patience ({})",
                self.plateau_patience, self.early_stop_patience
            ));
        }
        Ok(())
    }
}

/// Mean squared difference over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::at(
            "mse",
            TensorError::Shape {
                op: "mse",
                expected: target.shape().to_vec(),
                got: pred.shape().to_vec(),
            },
        ));
    }
    if pred.numel() == 0 {
        return Err(Error::data("mse of empty tensors"));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.numel() as f64)
}

/// Element-weighted MSE of deterministic predictions over `windows`, or
/// `None` when there are none.
pub fn eval_loss(model: &Model, windows: &[SampleWindow], batch_size: usize) -> Result<Option<f64>> {
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let (x, y) = batch(&refs)?;
        let pred = model.infer(&x)?;
        sum += mse(&pred, &y)? * y.numel() as f64;
        count += y.numel();
    }
    Ok((count > 0).then(|| sum / count as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss during the epoch, weighted by batch size.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    /// Its monitored loss (validation, or training when there is no
    /// validation split).
    pub best_loss: Option<f64>,
    pub stop_reason: StopReason,
    pub steps: u64,
}

impl RunHistory {
    /// The history with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        for e in &mut h.epochs {
            e.seconds = 0.0;
        }
        h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let h: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if h.schema_version != RUN_SCHEMA {
            return Err(Error::data(format!(
                "{}: unsupported run schema {}",
                path.display(),
                h.schema_version
            )));
        }
        Ok(h)
    }
}

/// Loss, gradients and batch-norm statistics of one training batch.
pub struct BatchPass {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub stats: Vec<(String, tencore::NormStats)>,
}

/// Forward and backward on one batch in training mode.
pub fn batch_gradients(model: &Model, x: Tensor, y: Tensor, dropout_seed: u64) -> Result<BatchPass> {
    let mut ctx = model.context(Mode::train(model.config().dropout), dropout_seed);
    let xv = ctx.input(x);
    let out = model.forward_var(&mut ctx, xv)?;
    let t = ctx.tape.constant(y);
    let l = ctx.tape.mse(out, t).at("loss")?;
    let loss = ctx.value(l).item().expect("scalar loss");
    let grads = ctx.gradients(l)?;
    Ok(BatchPass {
        loss,
        grads,
        stats: ctx.batch_stats().to_vec(),
    })
}

fn locate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical { path, op } => Error::Numerical {
            path: format!("{path} (epoch {epoch}, batch {batch})"),
            op,
        },
        e => e,
    }
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// epoch. Batches are reshuffled each epoch; the final partial batch is
/// kept. With an empty `val`, the training loss drives scheduling and model
/// selection.
pub fn train(
    model: &mut Model,
    train: &[SampleWindow],
    val: &[SampleWindow],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let mut history = RunHistory {
        schema_version: RUN_SCHEMA,
        config: cfg.clone(),
        epochs: Vec::new(),
        best_epoch: None,
        best_loss: None,
        stop_reason: StopReason::MaxEpochs,
        steps: 0,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20b);
    let mut adam = Adam::new(model.params());
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best: Option<(ParamStore, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = scheduler.lr;
        order.shuffle(&mut order_rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&SampleWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = batch(&refs)?;
            let pass = batch_gradients(model, x, y, dropout_rng.random()).map_err(|e| locate(e, epoch, b))?;
            if !pass.loss.is_finite() || pass.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical {
                    path: format!("training (epoch {epoch}, batch {b})"),
                    op: "mse loss".into(),
                });
            }
            adam.step(model.params_mut(), &pass.grads, lr)?;
            model.update_running_stats(&pass.stats)?;
            history.steps += 1;
            sum += pass.loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = sum / seen as f64;
        let val_loss = eval_loss(model, val, cfg.batch_size)?;
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::Numerical {
                path: format!("validation (epoch {epoch})"),
                op: "mse loss".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        scheduler.observe(monitored);
        let decision = stopper.observe(monitored);
        if decision == Decision::Improved {
            best = Some((model.params().clone(), model.buffers().clone()));
            history.best_epoch = Some(epoch);
            history.best_loss = Some(monitored);
        }
        if decision == Decision::Stop {
            history.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    if let Some((params, buffers)) = best {
        *model.params_mut() = params;
        *model.buffers_mut() = buffers;
    }
    Ok(history)
}
