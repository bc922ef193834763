//! Dataset abstraction: domain types, deterministic splits, annotation
//! rasterization, episode sampling, the synthetic generator, and disk I/O.
//!
//! All operations here are pure functions of `(inputs, seed)`; dataset
//! objects are immutable after construction and safe to share across
//! threads.

mod episode;
mod io;
mod raster;
mod split;
pub mod synthetic;
mod types;

pub use episode::sample_episode;
pub use io::{
    hflip_sample, load_bundle, read_meta, resize_image, save_bundle, DatasetMeta,
    DATASET_META_VERSION,
};
pub use raster::{rasterize_bbox, rasterize_parts, rasterize_parts_with, GtHeatmapStyle};
pub use split::{by_class, make_reference_query, split_classes};
pub use synthetic::{
    class_definitions, gen_synthetic, ClassDef, NovelIdentity, SyntheticConfig,
};
pub use types::{
    BBox, DatasetBundle, Episode, HeatmapKind, ImageSample, Keypoint, PartHeatmap,
    SplitAssignment,
};
