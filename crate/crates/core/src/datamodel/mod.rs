//! Maps, fixations, viewing geometry, datasets and the on-disk formats.

pub mod container;
pub mod dataset;
pub mod geometry;
pub mod manifest;
pub mod maps;

pub use container::{decode, encode, load_container, save_container, NamedTensors};
pub use dataset::{CueWindow, Dataset, VideoData, TARGET_FPS};
pub use geometry::ViewingGeometry;
pub use manifest::{split_by_video, subsample_indices, DatasetManifest, Modality, Split, Splits, VideoEntry};
pub use maps::{blur_fixation, density_from_group, FixationPoint, MapKind, ObserverId, PriorityMap};
