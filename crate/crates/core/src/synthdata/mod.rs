//! Synthetic referring-segmentation corpus: colored-shape scenes with
//! templated expressions, exact ground-truth masks, corruptions and
//! evaluation-time occlusion.

mod corrupt;
mod dataset;
mod scene;

pub use corrupt::{corrupt, occlude_eval, CorruptionKind, Occluded};
pub use dataset::{
    dataset_manifest, decode_dataset, encode_dataset, generate_dataset, manifest_path, read_dataset, split_of,
    write_atomic, write_dataset, Dataset, Split, DATASET_MAGIC, DATASET_VERSION,
};
pub use scene::{
    generate_scene, ground_truth, render, resolve, sample_from_scene, Occluder, SampleRecord, SceneConfig, SceneSpec,
    Shape, ShapeColor, ShapeKind, Tag, Tags, OCCLUDER_GRAY, OCCLUSION_TAG_FRACTION, RESOLVE_MARGIN,
};
