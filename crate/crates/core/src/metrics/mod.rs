//! Image metrics, frozen feature extractors, two-way identification, the
//! 2AFC harness with sentinel trials, and ROI importance maps.

mod evaluate;
mod features;
mod identification;
mod image;
mod report;
mod roi;
pub mod svg;
mod twoafc;

pub use evaluate::{evaluate, write_evaluation, Evaluation};
pub use features::{ExtractorKind, FeatureExtractor, EXTRACTOR_SEED};
pub use identification::{correlation_distance, correlation_matrix, two_way_from_correlations, two_way_identification};
pub use image::{pearson, pixcorr, ssim, ssim_with, SsimParams, SSIM_K1, SSIM_K2, SSIM_WINDOW};
pub use report::{ExtractorBank, MetricReport, MetricRow, SubjectRow, COLUMNS, DISTANCE_KINDS, TWO_WAY_KINDS};
pub use roi::{roi_group, roi_importance, voxel_importance, RoiImportanceMap, ROI_GROUPS};
pub use twoafc::{
    build_trials, run_2afc, Choice, FeatureJudge, Judge, JudgeRecord, OptionSource, RandomJudge, Response, Trial,
    TwoAfcResult, TwoAfcSpec, SENTINEL_EVERY,
};
