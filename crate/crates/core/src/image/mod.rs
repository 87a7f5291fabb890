//! Raster I/O, augmentation transforms, the toy region encoder and the
//! feature file format.

mod augment;
pub(crate) mod encoder;
mod raster;
mod transform;

pub use augment::{AugmentKind, AugmentPolicy, Transform, DEFAULT_DISTORTION};
pub use encoder::{toy_encode, FeatureSet, ImageFeatures, DESCRIPTOR_LEN};
pub use raster::{contact_sheet, sheet_origin, ImageRaster, SHEET_GAP};
pub use transform::{flip_h, flip_v, rotate90k, warp_perspective, Homography};
