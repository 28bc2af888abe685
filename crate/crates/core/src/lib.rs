pub mod checkpoint;
pub mod compositor;
pub mod error;
pub mod evalbench;
pub mod geometry;
pub mod nn;
pub mod objectfield;
pub mod real;
pub mod scalenet;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use checkpoint::Checkpoint;
pub use geometry::{Intrinsics, Pose, Ray, ScaleBounds, ScaleCombination, Vec3};
pub use scenegen::{GtSidecar, SceneBundle};
