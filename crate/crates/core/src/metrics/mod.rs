//! Sample-quality metrics: SSIM, Gaussian Fréchet distance over pluggable
//! features, and the per-method evaluation report.

mod evaluate;
mod features;
mod frechet;
mod report;
mod ssim;

pub use evaluate::{evaluate, fid_between, reconstruct, EvalConfig, EvalDataset, EvalModel};
pub use features::{extract_features, FeatureExtractor, FeatureSpace, POOL_SIZE};
pub use frechet::{fit_gaussian, frechet_distance, GaussianStats};
pub use report::{MetricsReport, ReportRow};
pub use ssim::{ssim, ssim_unit_range, C1, C2};
