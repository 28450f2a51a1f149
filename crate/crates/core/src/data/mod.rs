//! Point-cloud files, manifests and the synthetic pedestrian generator.

pub mod format;
pub mod manifest;
pub mod synthetic;

pub use format::{read_cloud, read_cloud_from, write_cloud, write_cloud_to};
pub use manifest::{load_split, LabelMap, LoadedSample, Manifest, SampleRecord, Split};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec, MANIFEST_FILE};
