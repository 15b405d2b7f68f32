//! Dataset directories, prepared (filtered, windowed) datasets and the CSV
//! fixture format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tencore::Tensor;

use crate::error::{Error, Result};

use super::frames::{
    binarize_cloud, compute_normalizer, crop, split_train_val, window_passes, window_starts, FilterScope,
    FrameSequence, SampleWindow, WindowSpec,
};

pub const DATASET_SCHEMA: u32 = 1;
pub const PREPARED_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub name: String,
    pub units: String,
    pub timestep_minutes: u32,
    /// `[H, W]` of every frame.
    pub frame_shape: [usize; 2],
    pub dtype: String,
    /// Set when frames are already divided by a fixed normalizer.
    pub normalizer: Option<f64>,
}

impl DatasetMeta {
    pub fn new(name: impl Into<String>, units: impl Into<String>, timestep_minutes: u32, frame_shape: [usize; 2]) -> Self {
        Self {
            schema_version: DATASET_SCHEMA,
            name: name.into(),
            units: units.into(),
            timestep_minutes,
            frame_shape,
            dtype: "f32".into(),
            normalizer: None,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn tensor_error(path: &Path) -> impl FnOnce(tencore::TensorError) -> Error + '_ {
    move |e| Error::data(format!("{}: {e}", path.display()))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::data(format!("sequence id {id:?} must be non-empty [A-Za-z0-9_-]")));
    }
    Ok(())
}

/// Writes `dataset.json`, `index.txt` and `seq_<id>/frame_<k>.t32`.
pub fn write_dataset(dir: impl AsRef<Path>, meta: &DatasetMeta, seqs: &[FrameSequence]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut index = String::new();
    for seq in seqs {
        check_id(&seq.id)?;
        if seq.step_minutes != meta.timestep_minutes {
            return Err(Error::data(format!(
                "sequence {} has step {} min, dataset declares {}",
                seq.id, seq.step_minutes, meta.timestep_minutes
            )));
        }
        if seq.frame_shape().is_some_and(|s| s != meta.frame_shape) {
            return Err(Error::data(format!(
                "sequence {} has frames {:?}, dataset declares {:?}",
                seq.id,
                seq.frame_shape(),
                meta.frame_shape
            )));
        }
        let sdir = dir.join(format!("seq_{}", seq.id));
        fs::create_dir_all(&sdir).map_err(Error::io(&sdir))?;
        for (k, f) in seq.frames.iter().enumerate() {
            let path = sdir.join(format!("frame_{k}.t32"));
            f.save(&path).map_err(tensor_error(&path))?;
        }
        index.push_str(&format!("{} {} {}\n", seq.id, seq.len(), seq.start_minute));
    }
    write_json(&dir.join("dataset.json"), meta)?;
    let ipath = dir.join("index.txt");
    fs::write(&ipath, index).map_err(Error::io(&ipath))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<FrameSequence>)> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = read_json(&dir.join("dataset.json"))?;
    if meta.schema_version != DATASET_SCHEMA {
        return Err(Error::data(format!(
            "{}: unsupported dataset schema {}",
            dir.display(),
            meta.schema_version
        )));
    }
    let ipath = dir.join("index.txt");
    let index = fs::read_to_string(&ipath).map_err(Error::io(&ipath))?;
    let mut seqs = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        let bad = || Error::data(format!("{}:{}: malformed line {line:?}", ipath.display(), lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, len, start] = fields[..] else {
            return Err(bad());
        };
        let len: usize = len.parse().map_err(|_| bad())?;
        let start: i64 = start.parse().map_err(|_| bad())?;
        check_id(id)?;
        let sdir = dir.join(format!("seq_{id}"));
        let frames = (0..len)
            .map(|k| {
                let path = sdir.join(format!("frame_{k}.t32"));
                Tensor::load(&path).map_err(tensor_error(&path))
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = FrameSequence::new(id, frames, start, meta.timestep_minutes)?;
        if seq.frame_shape().is_some_and(|s| s != meta.frame_shape) {
            return Err(Error::data(format!(
                "{}: frames {:?} disagree with declared {:?}",
                sdir.display(),
                seq.frame_shape(),
                meta.frame_shape
            )));
        }
        seqs.push(seq);
    }
    Ok((meta, seqs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepareMode {
    /// Rain amounts: optional rain-fraction filter, divided by the
    /// training maximum.
    Precip,
    /// Cloud-type codes binarized to cloud / no cloud.
    Cloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub mode: PrepareMode,
    /// Minimum rain fraction (e.g. 0.5 or 0.2); `None` keeps every window.
    pub threshold: Option<f64>,
    pub scope: FilterScope,
    pub crop: Option<usize>,
    /// Top-left crop corner; centred when `None`.
    pub crop_offset: Option<(usize, usize)>,
    pub window: WindowSpec,
    pub val_fraction: f64,
    /// Fraction of whole sequences held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl PrepareOptions {
    pub fn new(mode: PrepareMode) -> Self {
        Self {
            mode,
            threshold: None,
            scope: FilterScope::Target,
            crop: None,
            crop_offset: None,
            window: match mode {
                PrepareMode::Precip => WindowSpec::precipitation(),
                PrepareMode::Cloud => WindowSpec::cloud(),
            },
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub schema_version: u32,
    pub options: PrepareOptions,
    /// Divisor applied to every frame; 1 for cloud masks.
    pub normalizer: f64,
    pub counts: SplitCounts,
}

/// Processed sequences plus the windows of each split.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub meta: PreparedMeta,
    pub dataset: DatasetMeta,
    pub sequences: Vec<FrameSequence>,
    /// `(split, sequence position, window start)`
    pub entries: Vec<(Split, usize, usize)>,
}

/// Crops, binarizes (cloud), splits, filters and normalizes `seqs`.
///
/// Whole sequences are held out for testing; validation windows are drawn
/// per window from the remaining ones. The normalizer is the training
/// split maximum.
pub fn prepare(source: &DatasetMeta, seqs: &[FrameSequence], opts: &PrepareOptions) -> Result<Prepared> {
    opts.window.validate()?;
    if !(0.0..=1.0).contains(&opts.test_fraction) {
        return Err(Error::config(format!("test fraction {} outside [0, 1]", opts.test_fraction)));
    }
    if opts.threshold.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::config(format!("rain threshold {:?} outside [0, 1]", opts.threshold)));
    }
    let mut processed = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let mut s = seq.clone();
        if let Some(size) = opts.crop {
            s = s.try_map(|f| crop(f, size, opts.crop_offset))?;
        }
        if opts.mode == PrepareMode::Cloud {
            s = s.try_map(|f| binarize_cloud(f).map_err(|e| Error::data(format!("sequence {}: {e}", seq.id))))?;
        }
        processed.push(s);
    }

    let mut order: Vec<usize> = (0..processed.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_test = (opts.test_fraction * processed.len() as f64).round() as usize;
    let mut is_test = vec![false; processed.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }

    let mut train_val = Vec::new();
    let mut test = Vec::new();
    for (i, seq) in processed.iter().enumerate() {
        for start in window_starts(seq, &opts.window) {
            if opts
                .threshold
                .is_none_or(|t| window_passes(seq, start, &opts.window, t, opts.scope))
            {
                if is_test[i] { &mut test } else { &mut train_val }.push((i, start));
            }
        }
    }
    let (train, val) = split_train_val(&train_val, opts.val_fraction, opts.seed.wrapping_add(1))?;

    let normalizer = match opts.mode {
        PrepareMode::Cloud => 1.0,
        PrepareMode::Precip => {
            let windows = train
                .iter()
                .map(|&(i, s)| SampleWindow::cut(&processed[i], s, &opts.window))
                .collect::<Result<Vec<_>>>()?;
            compute_normalizer(&windows)?
        }
    };
    if normalizer != 1.0 {
        for seq in &mut processed {
            for f in &mut seq.frames {
                *f = f.map(|v| v / normalizer);
            }
        }
    }

    let mut entries = Vec::new();
    for (split, list) in [(Split::Train, &train), (Split::Val, &val), (Split::Test, &test)] {
        entries.extend(list.iter().map(|&(i, s)| (split, i, s)));
    }
    let shape = match opts.crop {
        Some(c) => [c, c],
        None => source.frame_shape,
    };
    let mut dataset = DatasetMeta::new(
        format!("{}-prepared", source.name),
        match opts.mode {
            PrepareMode::Precip => format!("{} / {normalizer}", source.units),
            PrepareMode::Cloud => "cloud mask".to_string(),
        },
        source.timestep_minutes,
        shape,
    );
    dataset.normalizer = Some(normalizer);
    Ok(Prepared {
        meta: PreparedMeta {
            schema_version: PREPARED_SCHEMA,
            options: opts.clone(),
            normalizer,
            counts: SplitCounts {
                train: train.len(),
                val: val.len(),
                test: test.len(),
            },
        },
        dataset,
        sequences: processed,
        entries,
    })
}

impl Prepared {
    pub fn windows(&self, split: Split) -> Result<Vec<SampleWindow>> {
        self.entries
            .iter()
            .filter(|e| e.0 == split)
            .map(|&(_, i, s)| SampleWindow::cut(&self.sequences[i], s, &self.meta.options.window))
            .collect()
    }

    /// Minutes ahead of the last input for each target frame.
    pub fn lead_minutes(&self) -> Vec<u32> {
        self.meta.options.window.lead_minutes(self.dataset.timestep_minutes)
    }

    /// A dataset directory plus `prepared.json` and `windows.txt`
    /// (`<split> <sequence id> <start>` per line).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_dataset(dir, &self.dataset, &self.sequences)?;
        write_json(&dir.join("prepared.json"), &self.meta)?;
        let text: String = self
            .entries
            .iter()
            .map(|&(split, i, s)| format!("{} {} {s}\n", split.name(), self.sequences[i].id))
            .collect();
        let path = dir.join("windows.txt");
        fs::write(&path, text).map_err(Error::io(&path))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (dataset, sequences) = read_dataset(dir)?;
        let meta: PreparedMeta = read_json(&dir.join("prepared.json"))?;
        if meta.schema_version != PREPARED_SCHEMA {
            return Err(Error::data(format!(
                "{}: unsupported prepared schema {}",
                dir.display(),
                meta.schema_version
            )));
        }
        let by_id: HashMap<&str, usize> = sequences.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let path = dir.join("windows.txt");
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = || Error::data(format!("{}:{}: malformed line {line:?}", path.display(), lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [split, id, start] = fields[..] else {
                return Err(bad());
            };
            let split = Split::parse(split).ok_or_else(bad)?;
            let i = *by_id.get(id).ok_or_else(bad)?;
            let start: usize = start.parse().map_err(|_| bad())?;
            if start + meta.options.window.span() > sequences[i].len() {
                return Err(bad());
            }
            entries.push((split, i, start));
        }
        Ok(Self {
            meta,
            dataset,
            sequences,
            entries,
        })
    }
}

/// Parses the fixture format: one frame per line, rows separated by `;`,
/// values by `,`. Blank lines and lines starting with `#` are skipped.
pub fn parse_frames_csv(text: &str) -> Result<Vec<Tensor>> {
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: String| Error::data(format!("fixture line {}: {what}", lineno + 1));
        let rows: Vec<Vec<f64>> = line
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("bad value {v:?}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(bad("ragged rows".into()));
        }
        let height = rows.len();
        frames.push(Tensor::new([height, width], rows.concat()).map_err(|e| bad(e.to_string()))?);
    }
    Ok(frames)
}

pub fn read_frames_csv(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_frames_csv(&text)
}
