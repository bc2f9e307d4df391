//! Raster and mask primitives shared by every stage.

mod geometry;
mod mask;
mod rle;
mod spatial;
mod stack;

pub use geometry::{
    containment, convex_hull, footprint_containment, footprint_iou, footprint_solidity, iou, is_nonconcave,
    polygon_area, solidity, DEFAULT_SOLIDITY_THRESHOLD,
};
pub use mask::{AnnotationSet, BBox, Footprint, InstanceMask, Stage};
pub use rle::{rle_decode, rle_encode, Bitmap, Rle};
pub use spatial::BoxIndex;
pub use stack::{ChannelStack, DAPI, PAN_HISTONE};
