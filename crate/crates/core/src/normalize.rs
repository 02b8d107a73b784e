//! Affine maps between raw pixel data and the `[-1, 1]` working range.

use crate::error::{Error, Result};
use crate::types::{TrajectoryAction, VideoClipState};

/// Maps `u8` pixels laid out `(L, H, W, 3)` to `[-1, 1]` via `2v/255 - 1`.
pub fn normalize_frames(
    raw: &[u8],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<VideoClipState> {
    let want = frames * height * width * 3;
    if raw.len() != want {
        return Err(Error::shape(format!(
            "raw clip ({frames}, {height}, {width}, 3) needs {want} bytes, got {}",
            raw.len()
        )));
    }
    let data = raw.iter().map(|&v| 2.0 * v as f32 / 255.0 - 1.0).collect();
    VideoClipState::clean(frames, height, width, data)
}

/// Inverse of [`normalize_frames`], rounding to the nearest level.
pub fn denormalize_frames(clip: &VideoClipState) -> Vec<u8> {
    clip.data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

fn to_unit(v: f64, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * v / (extent - 1) as f64 - 1.0
    }
}

fn from_unit(v: f64, extent: usize) -> f64 {
    (v + 1.0) * 0.5 * extent.saturating_sub(1) as f64
}

/// Pixel coordinates `(x, y)` to normalized coordinates. Points must lie in
/// `[0, W-1] x [0, H-1]`.
pub fn normalize_trajectory(
    points_px: &[[f64; 2]],
    height: usize,
    width: usize,
) -> Result<TrajectoryAction> {
    for (i, p) in points_px.iter().enumerate() {
        let inside = p[0].is_finite()
            && p[1].is_finite()
            && (0.0..=(width as f64 - 1.0)).contains(&p[0])
            && (0.0..=(height as f64 - 1.0)).contains(&p[1]);
        if !inside {
            return Err(Error::Validation(format!(
                "point {i} ({}, {}) outside the {width}x{height} image",
                p[0], p[1]
            )));
        }
    }
    TrajectoryAction::new(
        points_px
            .iter()
            .map(|p| [to_unit(p[0], width) as f32, to_unit(p[1], height) as f32])
            .collect(),
    )
}

pub fn denormalize_trajectory(action: &TrajectoryAction, height: usize, width: usize) -> Vec<[f64; 2]> {
    action
        .points()
        .iter()
        .map(|p| [from_unit(p[0] as f64, width), from_unit(p[1] as f64, height)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_bounds() {
        let lo = normalize_frames(&[0; 12], 1, 2, 2).unwrap();
        assert!(lo.data().iter().all(|&v| v == -1.0));
        let hi = normalize_frames(&[255; 12], 1, 2, 2).unwrap();
        assert!(hi.data().iter().all(|&v| v == 1.0));
        let mid = normalize_frames(&[128; 3], 1, 1, 1).unwrap();
        assert!((mid.data()[0] - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-7);
        assert!((mid.data()[0] - 0.003_92).abs() < 1e-5);
        assert!(normalize_frames(&[0; 11], 1, 2, 2).is_err());
    }

    #[test]
    fn trajectory_examples() {
        let a = normalize_trajectory(&[[0.0, 0.0], [127.0, 127.0], [63.5, 63.5]], 128, 128).unwrap();
        assert_eq!(a.points(), &[[-1.0, -1.0], [1.0, 1.0], [0.0, 0.0]]);
        assert!(normalize_trajectory(&[[128.0, 0.0]], 128, 128).is_err());
        assert!(normalize_trajectory(&[[-0.1, 0.0]], 128, 128).is_err());
    }

    proptest! {
        #[test]
        fn frames_round_trip(raw in proptest::collection::vec(any::<u8>(), 12)) {
            let clip = normalize_frames(&raw, 1, 2, 2).unwrap();
            prop_assert_eq!(denormalize_frames(&clip), raw.clone());
            for (&v, &r) in clip.data().iter().zip(&raw) {
                prop_assert!(((v + 1.0) * 127.5 - r as f32).abs() <= 255.0 / 255.0 * 0.5 + 1e-3);
            }
        }

        #[test]
        fn trajectory_round_trip(pts in proptest::collection::vec((0.0f64..127.0, 0.0f64..127.0), 1..8)) {
            let px: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let a = normalize_trajectory(&px, 128, 128).unwrap();
            let back = denormalize_trajectory(&a, 128, 128);
            for (p, q) in px.iter().zip(&back) {
                prop_assert!((p[0] - q[0]).abs() <= 0.5 && (p[1] - q[1]).abs() <= 0.5);
            }
        }
    }
}
