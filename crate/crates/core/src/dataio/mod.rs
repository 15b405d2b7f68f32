//! Frame sequences, windowing, filtering and normalization, cloud-code
//! binarization, synthetic data and the on-disk formats.

mod frames;
mod store;
mod synth;

pub use frames::{
    batch, binarize_cloud, compute_normalizer, crop, crop_center, filter_dataset, make_windows, normalize,
    rain_fraction, split_train_val, window_passes, window_starts, FilterScope, FrameSequence, SampleWindow,
    TargetMode, WindowSpec,
};
pub use store::{
    parse_frames_csv, prepare, read_dataset, read_frames_csv, write_dataset, DatasetMeta, PrepareMode,
    PrepareOptions, Prepared, PreparedMeta, Split, SplitCounts, DATASET_SCHEMA, PREPARED_SCHEMA,
};
pub use synth::{synth_generate, synth_velocities, SynthConfig, SynthKind, RAIN_CUTOFF};
