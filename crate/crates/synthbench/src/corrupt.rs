//! Image corruptions for robustness tests.

use eqdiff_core::VideoClipState;

use crate::error::{Result, SynthError};

pub const MAX_SEVERITY: u8 = 5;

/// Normalized Gaussian taps for a severity level. Severity 1 is the identity
/// and each level widens the kernel radius by one pixel with `sigma = r / 2`.
pub fn blur_kernel(severity: u8) -> Result<Vec<f64>> {
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(SynthError::Config(format!(
            "blur severity must be in 1..={MAX_SEVERITY}, got {severity}"
        )));
    }
    let r = (severity - 1) as i64;
    if r == 0 {
        return Ok(vec![1.0]);
    }
    let sigma = r as f64 / 2.0;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur of every frame with wrap-around borders.
pub fn blur_corrupt(clip: &VideoClipState, severity: u8) -> Result<VideoClipState> {
    let taps = blur_kernel(severity)?;
    if taps.len() == 1 {
        return Ok(clip.clone());
    }
    let (l, s) = (clip.frames(), clip.height());
    let r = (taps.len() / 2) as isize;
    let src = clip.data();
    let idx = |f: usize, y: usize, x: usize, c: usize| ((f * s + y) * s + x) * 3 + c;
    let wrap = |v: isize| v.rem_euclid(s as isize) as usize;
    let mut tmp = vec![0.0f64; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for f in 0..l {
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    tmp[idx(f, y, x, c)] = taps
                        .iter()
                        .enumerate()
                        .map(|(k, w)| w * src[idx(f, y, wrap(x as isize + k as isize - r), c)] as f64)
                        .sum();
                }
            }
        }
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    let v: f64 = taps
                        .iter()
                        .enumerate()
                        .map(|(k, w)| w * tmp[idx(f, wrap(y as isize + k as isize - r), x, c)])
                        .sum();
                    out[idx(f, y, x, c)] = (v as f32).clamp(-1.0, 1.0);
                }
            }
        }
    }
    Ok(VideoClipState::new(l, s, s, out)?)
}
