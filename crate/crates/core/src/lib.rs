//! Split conformal prediction over classifier logits, with calibration maps
//! tuned for prediction-set efficiency.
//!
//! Typical flow: load or [`generate`] a [`LogitsDataset`], split it, tune a
//! [`CalibrationMap`] with [`tune_temperature`], calibrate a
//! [`ConformalThreshold`] and build sets with [`predict_sets`].

pub mod conformal;
pub mod dataset;
pub mod error;
pub mod maps;
pub mod metrics;
pub mod oracle;
pub mod score;
pub mod synth;
pub mod tuner;

pub use conformal::{
    calibrate_threshold, conformal_rank, min_calibration_size, predict_set, predict_sets, predict_sets_with,
    read_sets, run_pipeline, run_pipeline_with, write_sets, ConformalThreshold, PipelineOutput, PredictionSet, Tau,
};
pub use dataset::{load_dataset, save_dataset, split_dataset, Format, LogitsDataset, SplitSpec};
pub use error::{Error, Result};
pub use maps::{apply_map, apply_map_dataset, apply_map_dataset_with, CalibrationMap, MapKind, Precision, ProbMatrix};
pub use metrics::{
    coverage_and_size, default_rank_bins, evaluate, expected_calibration_error, parse_rank_bins, size_by_rank,
    truncation_diagnostic, EvaluateOptions, EvaluationReport, RankBin, TruncationDiagnostic,
};
pub use score::{draw_u, rank_row, score, score_all_classes, RankedRow, ScoreKind, ScoreSpec};
pub use synth::{generate, generate_paired_shifted, SynthSpec};
pub use tuner::{
    confts_loss, confts_loss_with, efficiency_gap, tune_map, tune_map_on, tune_temperature, tune_temperature_on,
    LossScore, TuneConfig, TuneReport, Tuned,
};
