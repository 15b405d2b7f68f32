//! Forecast scores, model comparison tables and test-time dropout
//! uncertainty.

mod compare;
mod metrics;
mod render;
mod uncertainty;

pub use compare::{evaluate_models, metrics_csv, render_table, EvalOptions, Predictor, METRICS_HEADER, PERSISTENCE};
pub use metrics::{
    binarize, confusion, metrics, Averaging, ConfusionCounts, MetricsAccumulator, MetricsReport, Scores, Undefined,
    THRESHOLD,
};
pub use render::{encode_pgm, range_path, write_pgm};
pub use uncertainty::{
    log_mean_per_frame, pixel_moments, ttd, uncertainty_csv, uncertainty_curve, CurvePoint, TtdOptions,
    UncertaintyResult, DEFAULT_DROPOUT, DEFAULT_SAMPLES, UNCERTAINTY_HEADER,
};
