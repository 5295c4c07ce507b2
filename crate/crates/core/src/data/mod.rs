//! Datasets, image grids and checkpoints.

mod checkpoint;
mod idx;
mod image;
mod toy;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, IDX_IMAGES, IDX_LABELS};
pub use image::{encode_image_grid, read_tensor, write_image_grid, write_tensor};
pub use toy::{gen_toy_dataset, ToyKind};

use crate::real::{r, Real};
use crate::tensor::Tensor;

/// Images `[M, C, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<u8>>,
    /// Where the images came from: a path or a generator description.
    pub source: String,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }
}

/// `p / 127.5 - 1`, so 0 maps to -1 and 255 to +1 exactly.
pub fn pixel_to_unit<T: Real>(p: u8) -> T {
    r(p as f64 / 127.5 - 1.0)
}

/// Inverse of [`pixel_to_unit`] after clamping to `[-1, 1]`.
pub fn unit_to_pixel<T: Real>(x: T) -> u8 {
    let x = x.to_f64_lossy();
    let x = if x.is_nan() { -1.0 } else { x.clamp(-1.0, 1.0) };
    ((x + 1.0) * 127.5).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit::<f32>(p)), p);
            assert_eq!(unit_to_pixel(pixel_to_unit::<f64>(p)), p);
        }
        assert_eq!(pixel_to_unit::<f64>(0), -1.0);
        assert_eq!(pixel_to_unit::<f64>(255), 1.0);
        assert!((pixel_to_unit::<f64>(128) - 0.00392).abs() < 1e-5);
        assert_eq!(unit_to_pixel(7.0f64), 255);
        assert_eq!(unit_to_pixel(f64::NAN), 0);
    }
}
