use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tencore::Tensor;

use crate::error::{Error, Result};

/// Consecutive 2-D frames of one source at a fixed time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Tensor>,
    /// Minutes since epoch of frame 0.
    pub start_minute: i64,
    pub step_minutes: u32,
}

impl FrameSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Tensor>, start_minute: i64, step_minutes: u32) -> Result<Self> {
        let id = id.into();
        if step_minutes == 0 {
            return Err(Error::data(format!("sequence {id}: zero time step")));
        }
        if let Some(first) = frames.first() {
            if first.rank() != 2 {
                return Err(Error::data(format!("sequence {id}: frames must be 2-D, got {:?}", first.shape())));
            }
            if let Some(k) = frames.iter().position(|f| f.shape() != first.shape()) {
                return Err(Error::data(format!(
                    "sequence {id}: frame {k} has shape {:?}, frame 0 has {:?}",
                    frames[k].shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self {
            id,
            frames,
            start_minute,
            step_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> Option<[usize; 2]> {
        self.frames.first().map(|f| [f.shape()[0], f.shape()[1]])
    }

    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.len() as i64)
            .map(|k| self.start_minute + k * self.step_minutes as i64)
            .collect()
    }

    /// Applies `f` to every frame.
    pub fn try_map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(self.id.clone(), frames, self.start_minute, self.step_minutes)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Only the final frame of the window.
    #[default]
    Last,
    /// Every frame after the inputs, gap frames included.
    All,
}

/// Geometry of a sliding window: `input_frames`, then `gap` skipped frames,
/// then `output_frames`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_frames: usize,
    pub gap: usize,
    pub output_frames: usize,
    pub target_mode: TargetMode,
}

impl WindowSpec {
    /// 12 inputs, target 30 minutes after the last input (frame 17 of 18).
    pub fn precipitation() -> Self {
        Self {
            input_frames: 12,
            gap: 5,
            output_frames: 1,
            target_mode: TargetMode::Last,
        }
    }

    /// 4 inputs followed by 6 targets.
    pub fn cloud() -> Self {
        Self {
            input_frames: 4,
            gap: 0,
            output_frames: 6,
            target_mode: TargetMode::All,
        }
    }

    pub fn span(&self) -> usize {
        self.input_frames + self.gap + self.output_frames
    }

    /// Frame offsets (from the window start) that form the target.
    pub fn target_offsets(&self) -> Vec<usize> {
        match self.target_mode {
            TargetMode::Last => vec![self.span() - 1],
            TargetMode::All => (self.input_frames..self.span()).collect(),
        }
    }

    pub fn target_count(&self) -> usize {
        self.target_offsets().len()
    }

    /// Minutes between the last input frame and each target frame.
    pub fn lead_minutes(&self, step_minutes: u32) -> Vec<u32> {
        self.target_offsets()
            .into_iter()
            .map(|o| (o + 1 - self.input_frames) as u32 * step_minutes)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_frames == 0 || self.output_frames == 0 {
            return Err(Error::config("window needs at least one input and one output frame"));
        }
        Ok(())
    }
}

/// One example: stacked input frames and target frames cut from a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// `[T_in, H, W]`
    pub input: Tensor,
    /// `[T_out, H, W]`
    pub target: Tensor,
    pub source: String,
    pub start: usize,
}

impl SampleWindow {
    pub fn cut(seq: &FrameSequence, start: usize, spec: &WindowSpec) -> Result<Self> {
        if start + spec.span() > seq.len() {
            return Err(Error::data(format!(
                "window at {start} of span {} overruns sequence {} of length {}",
                spec.span(),
                seq.id,
                seq.len()
            )));
        }
        let stack = |idx: &mut dyn Iterator<Item = usize>| {
            let frames: Vec<Tensor> = idx.map(|k| seq.frames[start + k].clone()).collect();
            Tensor::stack(&frames).map_err(|e| Error::data(format!("sequence {}: {e}", seq.id)))
        };
        Ok(Self {
            input: stack(&mut (0..spec.input_frames))?,
            target: stack(&mut spec.target_offsets().into_iter())?,
            source: seq.id.clone(),
            start,
        })
    }
}

/// Window start offsets of a sequence (stride 1).
pub fn window_starts(seq: &FrameSequence, spec: &WindowSpec) -> std::ops::Range<usize> {
    0..(seq.len() + 1).saturating_sub(spec.span())
}

/// All stride-1 windows of `seq`. Sequences shorter than the span yield none.
pub fn make_windows(seq: &FrameSequence, spec: &WindowSpec) -> Result<Vec<SampleWindow>> {
    spec.validate()?;
    window_starts(seq, spec).map(|s| SampleWindow::cut(seq, s, spec)).collect()
}

/// Fraction of pixels strictly above zero.
pub fn rain_fraction(frame: &Tensor) -> f64 {
    if frame.numel() == 0 {
        return 0.0;
    }
    frame.data().iter().filter(|&&v| v > 0.0).count() as f64 / frame.numel() as f64
}

/// Which frames of a window must pass the rain-fraction threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScope {
    #[default]
    Target,
    /// Every frame of the span, gap frames included.
    All,
}

/// Whether the window at `start` has at least `threshold` rainy pixels in
/// the frames selected by `scope`.
pub fn window_passes(seq: &FrameSequence, start: usize, spec: &WindowSpec, threshold: f64, scope: FilterScope) -> bool {
    let offsets: Vec<usize> = match scope {
        FilterScope::Target => spec.target_offsets(),
        FilterScope::All => (0..spec.span()).collect(),
    };
    offsets
        .into_iter()
        .all(|o| rain_fraction(&seq.frames[start + o]) >= threshold)
}

/// Windows of every sequence, keeping those that pass `threshold` (all of
/// them when `None`).
pub fn filter_dataset(
    seqs: &[FrameSequence],
    spec: &WindowSpec,
    threshold: Option<f64>,
    scope: FilterScope,
) -> Result<Vec<SampleWindow>> {
    spec.validate()?;
    let mut out = Vec::new();
    for seq in seqs {
        for start in window_starts(seq, spec) {
            if threshold.is_none_or(|t| window_passes(seq, start, spec, t, scope)) {
                out.push(SampleWindow::cut(seq, start, spec)?);
            }
        }
    }
    Ok(out)
}

/// Largest pixel value over the inputs and targets of `train`.
pub fn compute_normalizer(train: &[SampleWindow]) -> Result<f64> {
    let max = train
        .iter()
        .flat_map(|w| [w.input.max(), w.target.max()])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::data(format!(
            "degenerate normalizer {max} (training split empty or without positive values)"
        )));
    }
    Ok(max)
}

pub fn normalize(windows: &mut [SampleWindow], normalizer: f64) {
    for w in windows {
        w.input = w.input.map(|v| v / normalizer);
        w.target = w.target.map(|v| v / normalizer);
    }
}

/// Cloud-type codes 1–4 (cloud-free surfaces) become 0, codes 5–15 become 1.
pub fn binarize_cloud(frame: &Tensor) -> Result<Tensor> {
    let mut out = frame.clone();
    let cols = frame.shape().last().copied().unwrap_or(1).max(1);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let code = *v;
        *v = match code {
            c if c.fract() == 0.0 && (1.0..=4.0).contains(&c) => 0.0,
            c if c.fract() == 0.0 && (5.0..=15.0).contains(&c) => 1.0,
            c => {
                return Err(Error::data(format!(
                    "cloud code {c} outside 1..=15 at row {}, column {}",
                    i / cols,
                    i % cols
                )))
            }
        };
    }
    Ok(out)
}

/// Randomly moves `round(fraction · n)` windows to a validation split.
/// Both splits keep their original relative order.
pub fn split_train_val<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("validation fraction {fraction} outside [0, 1]")));
    }
    let n_val = (fraction * items.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; items.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in items.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(item.clone());
    }
    Ok((train, val))
}

/// `size × size` crop with top-left corner `offset`, or centred when `None`.
pub fn crop(frame: &Tensor, size: usize, offset: Option<(usize, usize)>) -> Result<Tensor> {
    let [h, w] = frame.shape()[..] else {
        return Err(Error::data(format!("crop expects a 2-D frame, got {:?}", frame.shape())));
    };
    let (top, left) = offset.unwrap_or(((h.saturating_sub(size)) / 2, (w.saturating_sub(size)) / 2));
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::config(format!(
            "crop of {size}x{size} at ({top}, {left}) does not fit a {h}x{w} frame"
        )));
    }
    let mut data = Vec::with_capacity(size * size);
    for y in top..top + size {
        data.extend_from_slice(&frame.data()[y * w + left..y * w + left + size]);
    }
    Ok(Tensor::new([size, size], data).expect("crop shape"))
}

pub fn crop_center(frame: &Tensor, size: usize) -> Result<Tensor> {
    crop(frame, size, None)
}

/// Stacks window inputs into `[B, T_in, H, W]` and targets into
/// `[B, T_out, H, W]`.
pub fn batch(windows: &[&SampleWindow]) -> Result<(Tensor, Tensor)> {
    let err = |e: tencore::TensorError| Error::data(format!("batch: {e}"));
    let inputs: Vec<Tensor> = windows.iter().map(|w| w.input.clone()).collect();
    let targets: Vec<Tensor> = windows.iter().map(|w| w.target.clone()).collect();
    Ok((Tensor::stack(&inputs).map_err(err)?, Tensor::stack(&targets).map_err(err)?))
}
