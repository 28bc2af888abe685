//! Scene-level rendering of several objects under a scale combination,
//! soft Z-buffer labelling and the scene losses.

mod loss;
mod render;
mod softz;
mod view;

pub use loss::{object_losses, scene_losses, LossWeights, PixelTarget, SceneLosses, SEG_CLIP};
pub use render::{
    composite_backward, composite_backward_into, composite_render_rays, frame_poses, ray_in_object,
    scaled_composite_render, CompositeGrad, CompositeTape, RenderOutput,
};
pub use softz::{
    batch_pseudo_labels, labels_from_depths, pseudo_label, soft_z_depths, soft_z_depths_batch, soft_z_segmentation,
    SoftZConfig, SOFT_Z_MIN_OPACITY,
};
pub use view::{offset_view, render_view, RenderedView};
