/// A loss counts as an improvement when it beats the best so far by more
/// than this.
pub const MIN_IMPROVEMENT: f64 = 1e-8;

/// Tracks the best loss and how many epochs have passed without beating it.
#[derive(Clone, Copy, Debug, PartialEq)]
struct BestTracker {
    best: f64,
    stale: usize,
}

impl BestTracker {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Returns whether `loss` improved on the best.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }
}

/// Multiplies the learning rate by `factor` once the loss has not improved
/// for `patience` consecutive epochs. The count restarts after a reduction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    tracker: BestTracker,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            tracker: BestTracker::new(),
        }
    }

    /// Feeds one epoch's loss; returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if !self.tracker.observe(loss) && self.tracker.stale >= self.patience {
            self.lr *= self.factor;
            self.tracker.stale = 0;
        }
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.tracker.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// Continue; the epoch set a new best.
    Improved,
    Continue,
    Stop,
}

/// Stops once the loss has not improved for `patience` consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    tracker: BestTracker,
    best_epoch: Option<usize>,
    epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            tracker: BestTracker::new(),
            best_epoch: None,
            epochs: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Decision {
        let epoch = self.epochs;
        self.epochs += 1;
        if self.tracker.observe(loss) {
            self.best_epoch = Some(epoch);
            Decision::Improved
        } else if self.tracker.stale >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.tracker.best
    }
}
