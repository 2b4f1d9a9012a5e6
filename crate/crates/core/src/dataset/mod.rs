//! Manifest ingestion, label-schema unification, splitting and paired
//! augmentation.

mod augment;
mod manifest;

pub use augment::{
    augment_pair, eval_view, load_image, resize_bilinear, AugmentationConfig, Image, Transform,
    IMAGENET_MEAN, IMAGENET_STD,
};
pub use manifest::{
    load_manifest, parse_manifest, read_schema_map, split_manifest, write_manifest,
    ManifestRecord, SchemaMap, SchemaSet, Split, MANIFEST_HEADER,
};
