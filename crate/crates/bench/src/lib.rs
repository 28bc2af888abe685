//! Fixtures shared by the benchmarks.

use objscale_core::scalenet::ScaleMlp;
use objscale_core::scenegen::{synthesize, SceneParams};
use objscale_core::trainer::{anchor_order, init_fields, TrainConfig};
use objscale_core::{Checkpoint, SceneBundle};

/// Untrained model on the standard two-object toy, in checkpoint order.
/// Timing does not depend on what the fields have learned.
pub fn toy_model(objects: usize) -> (Checkpoint, SceneBundle) {
    let params = SceneParams {
        objects,
        ..SceneParams::default()
    };
    let (bundle, _) = synthesize(&params).expect("toy scene");
    let cfg = TrainConfig {
        skip_stage1: true,
        ..TrainConfig::default()
    };
    let order = anchor_order(&bundle);
    let bundle = bundle.reordered(&order);
    let fields = init_fields(&bundle, &cfg).expect("fields");
    let k = fields.len();
    let ckpt = Checkpoint {
        fields,
        scalenet: ScaleMlp::constant(k, 0.5),
        bounds: bundle.bounds().clone(),
        order,
        samples_per_ray: cfg.composite_samples,
    };
    (ckpt, bundle)
}
