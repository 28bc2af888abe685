//! Per-object radiance fields with VM tensor factors, independent volume
//! rendering and hand-written gradients.

mod field;
mod render;

pub use field::{
    encode_direction, Aabb, ColorTape, FieldGrads, FieldShape, Interp, VmField, VmParams, DENSITY_SHIFT, LINE_AXIS,
    PLANE_AXES,
};
pub(crate) use render::output_weight_grads;
pub use render::{
    compute_weights, field_backward, field_backward_into, render_ray_independent, render_rays, sample_distances,
    weights_backward, IndependentTape, RayGrad, RayRender, RenderConfig, OPACITY_EPS,
};
