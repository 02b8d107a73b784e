//! Procedural benchmark of image-conditioned trajectory tasks.
//!
//! Each scene draws a lesion curve over a textured background and a tool
//! marker that advances along it one step per frame. The label is the next
//! `N` positions along the curve. Context profiles separate the
//! in-context and out-of-context test splits, and every scene rotated by a
//! quarter turn is itself a valid scene.

pub mod corrupt;
pub mod dataset;
pub mod error;
pub mod profile;
pub mod scene;

pub use corrupt::{blur_corrupt, blur_kernel, MAX_SEVERITY};
pub use dataset::{
    audit_bounds, generate_dataset, generate_records, load_dataset, read_manifest, scene_seed, write_dataset,
    ClipRecord, Dataset, DatasetManifest, GenConfig, GlobalConfig, ManifestEntry, Split, SplitCounts,
    CHECKSUM_FILE, MANIFEST_FILE,
};
pub use error::{Result, SynthError};
pub use profile::{profile, profiles, ContextProfile, MarkerStyle, Texture};
pub use scene::{generate_scene, Scene, SceneSampler, SceneSpec};
