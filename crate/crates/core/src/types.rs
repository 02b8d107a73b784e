use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A stack of `L` RGB frames, stored `(L, H, W, 3)` row-major.
///
/// Clean clips hold values in `[-1, 1]`; noised clips produced by the
/// forward process may leave that range but are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClipState {
    frames: usize,
    size: usize,
    data: Vec<f32>,
}

impl VideoClipState {
    /// Builds a clip; values only need to be finite.
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 {
            return Err(Error::shape("clip needs L >= 1 and a non-empty grid"));
        }
        if height != width {
            return Err(Error::shape(format!("clip must be square, got {height}x{width}")));
        }
        let want = frames * height * width * 3;
        if data.len() != want {
            return Err(Error::shape(format!(
                "clip ({frames}, {height}, {width}, 3) needs {want} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                what: "clip".into(),
                index: i,
            });
        }
        Ok(Self {
            frames,
            size: height,
            data,
        })
    }

    /// Builds a clip that must lie in the clean `[-1, 1]` range.
    pub fn clean(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let clip = Self::new(frames, height, width, data)?;
        clip.validate_clean()?;
        Ok(clip)
    }

    pub fn zeros(frames: usize, size: usize) -> Self {
        Self {
            frames,
            size,
            data: vec![0.0; frames * size * size * 3],
        }
    }

    pub fn validate_clean(&self) -> Result<()> {
        match self.data.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            Some(i) => Err(Error::Validation(format!(
                "clip value {} at {i} outside [-1, 1]",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.size == other.size
    }

    fn at(&self, l: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((l * self.size + y) * self.size + x) * 3 + c]
    }

    /// Network layout `(L*3, H, W)`; channel `l*3 + c` is colour `c` of frame `l`.
    pub fn to_channels_first(&self) -> Vec<f32> {
        let s = self.size;
        let mut out = Vec::with_capacity(self.data.len());
        for l in 0..self.frames {
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        out.push(self.at(l, y, x, c));
                    }
                }
            }
        }
        out
    }

    pub fn from_channels_first(frames: usize, size: usize, data: &[f32]) -> Result<Self> {
        if data.len() != frames * size * size * 3 {
            return Err(Error::shape("channels-first buffer has the wrong length"));
        }
        let mut out = vec![0.0; data.len()];
        for l in 0..frames {
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        out[((l * size + y) * size + x) * 3 + c] =
                            data[((l * 3 + c) * size + y) * size + x];
                    }
                }
            }
        }
        Self::new(frames, size, size, out)
    }

    /// Rotates every frame by `quarter_turns` x 90 degrees about the image
    /// centre, in the same sense as [`TrajectoryAction::rotate_quarter`].
    pub fn rotate_quarter(&self, quarter_turns: usize) -> Self {
        let s = self.size;
        let map = crate::group::rotation_index(s, quarter_turns);
        let mut data = vec![0.0; self.data.len()];
        for l in 0..self.frames {
            let base = l * s * s;
            for (dst, &src) in map.iter().enumerate() {
                for c in 0..3 {
                    data[(base + dst) * 3 + c] = self.data[(base + src) * 3 + c];
                }
            }
        }
        Self {
            frames: self.frames,
            size: s,
            data,
        }
    }
}

/// `N` future waypoints in normalized image coordinates, `(x, y)` with `x`
/// along columns and `y` along rows. `-1` is pixel 0 and `+1` is pixel
/// `H - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAction {
    points: Vec<[f32; 2]>,
}

impl TrajectoryAction {
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::shape("trajectory needs at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Numeric {
                what: "trajectory".into(),
                index: i,
            });
        }
        Ok(Self { points })
    }

    pub fn from_flat(flat: &[f32]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::shape("flat trajectory must have even length"));
        }
        Self::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Counter-clockwise rotation about the image centre: `(1, 0)` maps to
    /// `(0, 1)` after one quarter turn.
    pub fn rotate(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            points: self
                .points
                .iter()
                .map(|&[x, y]| {
                    let (x, y) = (x as f64, y as f64);
                    [(c * x - s * y) as f32, (s * x + c * y) as f32]
                })
                .collect(),
        }
    }

    /// Exact rotation by multiples of 90 degrees.
    pub fn rotate_quarter(&self, quarter_turns: usize) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|&p| rotate_point_quarter(p, quarter_turns))
                .collect(),
        }
    }

    pub fn clipped(&self) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)])
                .collect(),
        }
    }
}

pub(crate) fn rotate_point_quarter([x, y]: [f32; 2], quarter_turns: usize) -> [f32; 2] {
    match quarter_turns % 4 {
        0 => [x, y],
        1 => [-y, x],
        2 => [-x, -y],
        _ => [y, -x],
    }
}

/// A joint sample `x_t = (s, a)` at diffusion level `noise_level`; level 0
/// is clean data.
#[derive(Clone, Debug, PartialEq)]
pub struct StateActionPair {
    pub state: VideoClipState,
    pub action: TrajectoryAction,
    pub noise_level: usize,
}

impl StateActionPair {
    pub fn clean(state: VideoClipState, action: TrajectoryAction) -> Self {
        Self {
            state,
            action,
            noise_level: 0,
        }
    }
}
