//! Evaluation metrics: image fidelity, depth accuracy, distribution distance,
//! and multi-view consistency aggregation.

mod depth;
mod frechet;
mod image;

pub use self::depth::{depth_metrics, depth_metrics_of, DepthAlign, DepthMetricReport};
pub use self::frechet::{
    embeddings_from_rows, fit_embedding_gaussian, frechet_distance, met3r_sequence,
    parse_pair_scores,
};
pub use self::image::{mse, psnr, ssim, ssim_gray};
