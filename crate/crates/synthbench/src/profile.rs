//! Visual context profiles. Training uses one set of profiles and the
//! out-of-context split another, so test scenes there differ in
//! background, colours and marker shape.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Per-pixel hashed noise.
    Speckle,
    /// A sinusoidal grating with a seeded direction.
    Stripes,
    /// A few seeded Gaussian blobs.
    Blobs,
    /// 4-pixel checkerboard.
    Checker,
}

/// Every style is symmetric under quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerStyle {
    Disk,
    Square,
    Cross,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextProfile {
    pub id: usize,
    pub texture: Texture,
    pub background: [[f64; 3]; 2],
    pub lesion: [f64; 3],
    pub marker: MarkerStyle,
    pub marker_color: [f64; 3],
}

const PROFILES: [ContextProfile; 6] = [
    ContextProfile {
        id: 0,
        texture: Texture::Speckle,
        background: [[0.45, 0.12, 0.15], [0.62, 0.25, 0.25]],
        lesion: [0.95, 0.92, 0.85],
        marker: MarkerStyle::Disk,
        marker_color: [0.1, 0.85, 0.9],
    },
    ContextProfile {
        id: 1,
        texture: Texture::Stripes,
        background: [[0.5, 0.2, 0.18], [0.7, 0.35, 0.3]],
        lesion: [0.95, 0.9, 0.4],
        marker: MarkerStyle::Square,
        marker_color: [0.2, 0.9, 0.3],
    },
    ContextProfile {
        id: 2,
        texture: Texture::Blobs,
        background: [[0.4, 0.1, 0.2], [0.65, 0.3, 0.35]],
        lesion: [0.9, 0.95, 0.9],
        marker: MarkerStyle::Cross,
        marker_color: [0.1, 0.8, 0.95],
    },
    ContextProfile {
        id: 3,
        texture: Texture::Checker,
        background: [[0.55, 0.18, 0.12], [0.68, 0.28, 0.2]],
        lesion: [0.98, 0.85, 0.45],
        marker: MarkerStyle::Disk,
        marker_color: [0.25, 0.95, 0.45],
    },
    ContextProfile {
        id: 4,
        texture: Texture::Blobs,
        background: [[0.3, 0.15, 0.35], [0.55, 0.35, 0.5]],
        lesion: [0.7, 0.85, 1.0],
        marker: MarkerStyle::Ring,
        marker_color: [0.95, 0.3, 0.9],
    },
    ContextProfile {
        id: 5,
        texture: Texture::Stripes,
        background: [[0.35, 0.22, 0.1], [0.6, 0.4, 0.2]],
        lesion: [1.0, 0.75, 0.35],
        marker: MarkerStyle::Square,
        marker_color: [0.95, 0.95, 0.95],
    },
];

pub fn profiles() -> &'static [ContextProfile] {
    &PROFILES
}

pub fn profile(id: usize) -> Option<&'static ContextProfile> {
    PROFILES.get(id)
}

/// Profiles used for training, validation and the in-context test split.
pub const DEFAULT_TRAIN_PROFILES: [usize; 4] = [0, 1, 2, 3];
/// Held-out profiles for the out-of-context test split.
pub const DEFAULT_OOC_PROFILES: [usize; 2] = [4, 5];
