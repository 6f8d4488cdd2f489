//! Checkpoint images, world manifests and restart planning.

mod image;
mod manifest;
mod restart;

pub use image::{read_image, write_image, CheckpointImage, Counters, ImageError, IMAGE_MAGIC, IMAGE_VERSION};
pub use manifest::{Manifest, ManifestError};
pub use restart::{assemble_restart, PlannedProcess, RestartError, RestartPlan};
