//! Implicit diffusion policy with rotation-equivariant representations.
//!
//! A single diffusion model is trained on joint `(clip, trajectory)` samples.
//! Trajectories are predicted by running the reverse process on the action
//! while the observed clip is re-noised to the current level at every step.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod equivariance;
pub mod error;
pub mod group;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod normalize;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod types;

pub use config::{DiffusionConfig, LrDecay, NetworkConfig, OptimizerConfig, ScheduleKind};
pub use error::{Error, Result};
pub use group::{
    rotate_action, rotate_field, rotate_tensor, CyclicGroup, FeatureField, FieldRep, FieldType,
    GroupElement,
};
pub use network::{NoisePrediction, PolicyNetwork};
pub use normalize::{denormalize_frames, denormalize_trajectory, normalize_frames, normalize_trajectory};
pub use schedule::NoiseSchedule;
pub use types::{StateActionPair, TrajectoryAction, VideoClipState};
