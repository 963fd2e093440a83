//! Cube and label containers, their file formats, and labeled/test split generation.

mod cube;
mod gt;
mod split;
pub mod synthetic;

pub use cube::{
    decode_cube, import_cube, normalize_cube, payload_for, read_cube, write_cube, AxisOrder, CubeDescriptor, Dtype,
    HsiCube,
};
pub use gt::{
    decode_gt, import_gt, read_gt, retained_count, subsample_classes, write_gt, GroundTruthMap, GtDescriptor,
};
pub use split::{
    augment_labeled_set, build_splits, make_split, split_path, AugEntry, AugmentedLabeledSet, SplitSpec,
};
