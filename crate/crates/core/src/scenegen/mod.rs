//! Synthetic multi-object scenes: analytic geometry, a sphere tracer, the
//! per-object up-to-scale data a monocular video yields, and a brute-force
//! validity oracle over scale combinations.

mod bundle;
mod oracle;
pub mod sdf;
mod world;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use bundle::{
    emit_bundle, load_bundle, load_gt, save_bundle, save_gt, true_free_scales, true_multipliers, GtSidecar, Manifest,
    SceneBundle, BOUND_PAD, FORMAT_VERSION,
};
pub use oracle::{
    agreement, front_most, oracle_valid_at, oracle_valid_region, relevant_pixels, OracleGrid, RelevantPixel,
    THETA_AGREE,
};
pub use world::{
    generate_scene, occlusion_frames, raytrace_frame, raytrace_view, Placement, SceneParams, TraceOutput, World,
    WorldObject, ROOM_HALF,
};

use crate::error::Result;

/// Gauge factors: 1 for the anchor, uniform in `[0.5, 2]` otherwise.
pub fn sample_gauge(seed: u64, objects: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6A09_E667_F3BC_C908);
    (0..objects)
        .map(|k| if k == 0 { 1.0 } else { rng.random_range(0.5..2.0) })
        .collect()
}

/// Generates, traces and emits a scene under a seeded hidden gauge.
pub fn synthesize(params: &SceneParams) -> Result<(SceneBundle, GtSidecar)> {
    let (world, traces) = generate_scene(params)?;
    let lambda = sample_gauge(params.seed, params.objects);
    emit_bundle(&world, &traces, &lambda)
}
