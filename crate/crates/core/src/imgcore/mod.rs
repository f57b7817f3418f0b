//! Images and the discrete test-time transform space.

mod image;
pub mod ppm;
pub mod resample;
mod transform;

pub(crate) use image::clamp_unit;
pub use image::Image;
pub use transform::{
    apply_for_model, apply_transform, crop_set, crop_side, crop_window, default_space, hflip,
    Transform, TransformKind, TransformSpace, CROP_RATIO,
};
