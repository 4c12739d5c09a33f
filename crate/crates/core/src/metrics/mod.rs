//! Evaluation metrics: 3D SSIM, MSE/PSNR and a Frechet distance over fixed
//! random-projection features.

pub mod frechet;
pub mod report;
pub mod ssim;

pub use frechet::{frechet_distance, frechet_proxy, FeatureExtractor};
pub use report::{evaluate, EvalPair, MetricConfig, MetricReport};
pub use ssim::{mse, psnr, ssim};
