//! Image, depth, segmentation and scale metrics; the best-of-N protocol
//! over several ground-truth scale configurations; scale-network quality
//! against the brute-force oracle; and the composite versus soft Z-buffer
//! benchmark.

mod bench;
mod metrics;
mod protocol;

pub use bench::{bench_soft_z, BenchConfig, BenchRow};
pub use metrics::{
    psnr, psnr_masked, roc_auc, scale_mse, seg_metrics, ssim, ssim_map, ssim_masked, ssimae, ImageBuf, SegMetrics,
    PSNR_CAP, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use protocol::{
    best_of, best_of_n_eval, build_gt_set, evaluate_samples, scalenet_vs_oracle, seen_voxels, EvalConfig,
    EvalMetrics, EvalReport, GtConfig, GtSet, GtView, MetricSummary, OracleComparison, ViewSpec,
};
