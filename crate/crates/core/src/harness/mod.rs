//! Data, training, metrics and the original-versus-dense experiment
//! pipeline.

mod config;
mod data;
mod experiment;
mod metrics;
mod train;

pub use config::{DataSource, ExperimentConfig, TaskKind, CONFIG_KEYS};
pub use data::{
    ar_spectral_radius, class_signature, forecast_series, gen_classification_toy, gen_synthetic_ar, load_csv,
    mask_for_imputation, read_csv_series, write_series_csv, CsvSeries, Split, SplitFractions, Standardizer, Target,
    Window, WindowedDataset, AR_BURN_IN,
};
pub use experiment::{
    analyze_snapshots, build_dataset, run_experiment, run_single_arm, AnalysisReport, ArmReport, DatasetSummary,
    ExperimentReport, ExperimentRun, PairAnalysis, SeedStreams, SnapshotSet, SCHEMA_VERSION,
};
pub use metrics::{
    accuracy, anomaly_f1, f1, f1_from_counts, macro_f1, mase, mse, threshold_anomalies, MaseScaling, Metrics,
};
pub use train::{
    clip_global_norm, evaluate, fit_adam, predict_split, train, Adam, BatchSampler, TrainConfig, TrainHistory,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CLIP_NORM, EVAL_CHUNK,
};
