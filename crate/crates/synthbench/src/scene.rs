//! Scene geometry and rendering.
//!
//! All geometry lives in pixel units relative to the image centre
//! `c = (size - 1) / 2`, with `x` along columns and `y` along rows. A
//! quarter turn maps `(x, y)` to `(-y, x)`, which is exact in floating
//! point, and every rendering step is built from operations that commute
//! with it. Rotating a spec therefore rotates its rendered frames
//! bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::profile::{profile, ContextProfile, MarkerStyle, Texture};

const CURVE_SAMPLES: usize = 257;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub profile: usize,
    pub size: usize,
    pub frames: usize,
    pub points: usize,
    /// Cubic Bézier control points relative to the image centre.
    pub control: [[f64; 2]; 4],
    /// Arc length of the first marker position.
    pub start: f64,
    /// Arc length the marker advances per frame.
    pub step: f64,
    /// Quarter turns applied to the background texture.
    pub orientation: usize,
    pub margin: f64,
    /// Bimodal scenes fork at the last observed position. `Some(true)`
    /// makes the mirrored branch the ground truth.
    pub fork: Option<bool>,
}

/// Rendered clip (`L x H x W x 3`, row-major RGB) and its future.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<u8>,
    /// Absolute pixel coordinates `(col, row)`.
    pub trajectory_px: Vec<[f64; 2]>,
    /// The other branch of a bimodal scene.
    pub alt_trajectory_px: Option<Vec<[f64; 2]>>,
}

fn rot(p: [f64; 2], quarter_turns: usize) -> [f64; 2] {
    match quarter_turns % 4 {
        0 => p,
        1 => [-p[1], p[0]],
        2 => [-p[0], -p[1]],
        _ => [p[1], -p[0]],
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Densely sampled polyline with cumulative arc length.
struct Curve {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Curve {
    fn bezier(c: &[[f64; 2]; 4]) -> Self {
        let pts: Vec<[f64; 2]> = (0..CURVE_SAMPLES)
            .map(|j| {
                let t = j as f64 / (CURVE_SAMPLES - 1) as f64;
                let u = 1.0 - t;
                let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
                let mut p = [0.0; 2];
                for k in 0..2 {
                    p[k] = w[0] * c[0][k] + w[1] * c[1][k] + w[2] * c[2][k] + w[3] * c[3][k];
                }
                p
            })
            .collect();
        let mut cum = vec![0.0; pts.len()];
        for j in 1..pts.len() {
            cum[j] = cum[j - 1] + sq_dist(pts[j], pts[j - 1]).sqrt();
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let j = self.cum.partition_point(|&l| l <= s).clamp(1, self.pts.len() - 1);
        let (l0, l1) = (self.cum[j - 1], self.cum[j]);
        let a = if l1 > l0 { ((s - l0) / (l1 - l0)).clamp(0.0, 1.0) } else { 0.0 };
        let (p, q) = (self.pts[j - 1], self.pts[j]);
        [p[0] + a * (q[0] - p[0]), p[1] + a * (q[1] - p[1])]
    }
}

/// Reflection across the line through `f` with direction `d`.
fn mirror(q: [f64; 2], f: [f64; 2], d: [f64; 2]) -> [f64; 2] {
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let n = [d[0] / len, d[1] / len];
    let v = [q[0] - f[0], q[1] - f[1]];
    let dot = v[0] * n[0] + v[1] * n[1];
    [f[0] + (2.0 * dot * n[0] - v[0]), f[1] + (2.0 * dot * n[1] - v[1])]
}

struct Geometry {
    /// Marker positions followed by the future waypoints.
    track: Vec<[f64; 2]>,
    alt: Option<Vec<[f64; 2]>>,
    /// Everything drawn as the lesion stroke.
    stroke: Vec<[f64; 2]>,
}

impl SceneSpec {
    fn centre(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    fn scale(&self) -> f64 {
        self.size as f64 / 16.0
    }

    /// The same scene turned by `quarter_turns` x 90 degrees about the centre.
    pub fn rotated(&self, quarter_turns: usize) -> Self {
        Self {
            control: self.control.map(|p| rot(p, quarter_turns)),
            orientation: (self.orientation + quarter_turns) % 4,
            ..self.clone()
        }
    }

    fn geometry(&self) -> Result<Geometry> {
        if self.size < 4 || self.frames == 0 || self.points == 0 {
            return Err(SynthError::Spec("scene needs size >= 4 and at least one frame and point".into()));
        }
        if self.step.is_nan() || self.step <= 0.0 || self.start.is_nan() || self.start < 0.0 {
            return Err(SynthError::Spec("step must be positive and start non-negative".into()));
        }
        if profile(self.profile).is_none() {
            return Err(SynthError::Spec(format!("unknown context profile {}", self.profile)));
        }
        let curve = Curve::bezier(&self.control);
        let total = self.frames + self.points;
        let end = self.start + (total - 1) as f64 * self.step;
        if end > curve.length() {
            return Err(SynthError::Spec(format!(
                "curve of length {:.2} leaves fewer than {} waypoints after the last frame",
                curve.length(),
                self.points
            )));
        }
        let track: Vec<[f64; 2]> = (0..total).map(|k| curve.at(self.start + k as f64 * self.step)).collect();
        let mut stroke = curve.pts.clone();
        let alt = match self.fork {
            None => None,
            Some(_) => {
                if self.frames < 2 {
                    return Err(SynthError::Spec("a forked scene needs at least two frames".into()));
                }
                let f = track[self.frames - 1];
                let p = track[self.frames - 2];
                let d = [f[0] - p[0], f[1] - p[1]];
                let s_f = self.start + (self.frames - 1) as f64 * self.step;
                stroke.extend(
                    curve
                        .pts
                        .iter()
                        .zip(&curve.cum)
                        .filter(|(_, &l)| l > s_f)
                        .map(|(q, _)| mirror(*q, f, d)),
                );
                Some(track[self.frames..].iter().map(|q| mirror(*q, f, d)).collect::<Vec<_>>())
            }
        };
        let limit = self.centre() - self.margin;
        if let Some(p) = stroke.iter().find(|p| p[0].abs() > limit || p[1].abs() > limit) {
            return Err(SynthError::Spec(format!(
                "curve point ({:.2}, {:.2}) violates the {:.1} px margin",
                p[0] + self.centre(),
                p[1] + self.centre(),
                self.margin
            )));
        }
        Ok(Geometry { track, alt, stroke })
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().map(|_| ())
    }

    /// Mean distance between the two branches of a forked scene.
    pub fn mode_separation(&self) -> Result<f64> {
        let g = self.geometry()?;
        let future = &g.track[self.frames..];
        Ok(match &g.alt {
            None => 0.0,
            Some(alt) => future.iter().zip(alt).map(|(a, b)| sq_dist(*a, *b).sqrt()).sum::<f64>() / future.len() as f64,
        })
    }
}

struct TextureField {
    kind: Texture,
    seed: u64,
    dir: [f64; 2],
    freq: f64,
    phase: f64,
    blobs: [[f64; 3]; 3],
}

impl TextureField {
    fn new(kind: Texture, seed: u64, centre: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0e5e_ed00_0001);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = rng.random_range(0.8..1.6);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut blobs = [[0.0; 3]; 3];
        for b in &mut blobs {
            *b = [
                rng.random_range(-centre..centre),
                rng.random_range(-centre..centre),
                rng.random_range(0.15..0.3) * 2.0 * centre,
            ];
        }
        Self {
            kind,
            seed,
            dir: [angle.cos(), angle.sin()],
            freq,
            phase,
            blobs,
        }
    }

    /// Value in `[0, 1]` at canonical (unrotated) centred coordinates.
    fn value(&self, u: f64, v: f64, centre: f64) -> f64 {
        match self.kind {
            Texture::Speckle => {
                let mut h = self.seed ^ ((2.0 * u) as i64 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                h ^= ((2.0 * v) as i64 as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
                h = (h ^ (h >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
                ((h ^ (h >> 31)) >> 11) as f64 / (1u64 << 53) as f64
            }
            Texture::Stripes => 0.5 + 0.5 * (self.freq * (self.dir[0] * u + self.dir[1] * v) + self.phase).sin(),
            Texture::Blobs => self
                .blobs
                .iter()
                .map(|b| (-((u - b[0]).powi(2) + (v - b[1]).powi(2)) / (2.0 * b[2] * b[2])).exp())
                .sum::<f64>()
                .min(1.0),
            Texture::Checker => {
                let i = ((u + centre) / 4.0).floor() as i64 + ((v + centre) / 4.0).floor() as i64;
                i.rem_euclid(2) as f64
            }
        }
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn marker_coverage(style: MarkerStyle, dx: f64, dy: f64, r: f64) -> f64 {
    let c = |v: f64| v.clamp(0.0, 1.0);
    let (ax, ay) = (dx.abs(), dy.abs());
    match style {
        MarkerStyle::Disk => c(r + 0.5 - (dx * dx + dy * dy).sqrt()),
        MarkerStyle::Square => c(r + 0.5 - ax.max(ay)),
        MarkerStyle::Cross => c(1.0 - ax.min(ay)) * c(r + 1.0 - ax.max(ay)),
        MarkerStyle::Ring => c(1.0 - ((dx * dx + dy * dy).sqrt() - r).abs()),
    }
}

/// Renders the clip and returns its ground-truth future.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let g = spec.geometry()?;
    let prof: &ContextProfile = profile(spec.profile).expect("checked by geometry");
    let (n, c, scale) = (spec.size, spec.centre(), spec.scale());
    let texture = TextureField::new(prof.texture, spec.seed, c);
    let half_width = 0.5 * scale;
    let radius = 1.0 * scale;
    let inverse = (4 - spec.orientation % 4) % 4;
    let mut base = vec![[0.0; 3]; n * n];
    for row in 0..n {
        for col in 0..n {
            let p = [col as f64 - c, row as f64 - c];
            let [u, v] = rot(p, inverse);
            let bg = lerp(prof.background[0], prof.background[1], texture.value(u, v, c));
            let d = g.stroke.iter().map(|q| sq_dist(p, *q)).fold(f64::INFINITY, f64::min).sqrt();
            let cov = (half_width + 0.5 - d).clamp(0.0, 1.0);
            base[row * n + col] = lerp(bg, prof.lesion, 0.85 * cov);
        }
    }
    let mut frames = Vec::with_capacity(spec.frames * n * n * 3);
    for m in &g.track[..spec.frames] {
        for row in 0..n {
            for col in 0..n {
                let p = [col as f64 - c, row as f64 - c];
                let cov = marker_coverage(prof.marker, p[0] - m[0], p[1] - m[1], radius);
                let px = lerp(base[row * n + col], prof.marker_color, cov);
                frames.extend(px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
            }
        }
    }
    let absolute = |pts: &[[f64; 2]]| pts.iter().map(|p| [p[0] + c, p[1] + c]).collect::<Vec<_>>();
    let future = absolute(&g.track[spec.frames..]);
    let (trajectory_px, alt_trajectory_px) = match (spec.fork, g.alt) {
        (Some(true), Some(alt)) => (absolute(&alt), Some(future)),
        (_, alt) => (future, alt.map(|a| absolute(&a))),
    };
    Ok(Scene {
        frames,
        trajectory_px,
        alt_trajectory_px,
    })
}

/// Shape and sampling settings for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSampler {
    pub size: usize,
    pub frames: usize,
    pub points: usize,
    pub margin: f64,
    pub bimodal: bool,
}

impl SceneSampler {
    /// Draws a valid scene by rejection. Control points are sorted by `x`,
    /// so the tool always heads right in the canonical orientation; the
    /// rotated test sets are then genuinely unseen headings.
    pub fn sample(&self, seed: u64, profile: usize) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = (self.size as f64 - 1.0) / 2.0;
        let scale = self.size as f64 / 16.0;
        let lim = centre - self.margin;
        if lim <= 1.0 {
            return Err(SynthError::Config(format!(
                "margin {} leaves no room in a {} px image",
                self.margin, self.size
            )));
        }
        for _ in 0..1000 {
            let mut xs: [f64; 4] = std::array::from_fn(|_| rng.random_range(-lim..lim));
            xs.sort_by(f64::total_cmp);
            let control = std::array::from_fn(|k| [xs[k], rng.random_range(-lim..lim)]);
            let step = rng.random_range(0.9..1.4) * scale;
            let need = (self.frames + self.points - 1) as f64 * step;
            let length = Curve::bezier(&control).length();
            if length < need + 0.5 {
                continue;
            }
            let spec = SceneSpec {
                seed,
                profile,
                size: self.size,
                frames: self.frames,
                points: self.points,
                control,
                start: rng.random_range(0.0..length - need),
                step,
                orientation: 0,
                margin: self.margin,
                fork: self.bimodal.then(|| rng.random_bool(0.5)),
            };
            if spec.validate().is_err() {
                continue;
            }
            if self.bimodal && spec.mode_separation()? < 1.5 * scale {
                continue;
            }
            return Ok(spec);
        }
        Err(SynthError::Config("could not place a valid curve; reduce the margin or the number of points".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use eqdiff_core::{normalize_frames, normalize_trajectory, VideoClipState};

    fn sampler(bimodal: bool) -> SceneSampler {
        SceneSampler {
            size: 16,
            frames: 3,
            points: 6,
            margin: 1.0,
            bimodal,
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let s = sampler(false).sample(11, 2).unwrap();
        assert_eq!(generate_scene(&s).unwrap(), generate_scene(&s).unwrap());
        assert_eq!(s, sampler(false).sample(11, 2).unwrap());
    }

    #[test]
    fn straight_line_gives_even_collinear_waypoints() {
        let spec = SceneSpec {
            seed: 0,
            profile: 0,
            size: 16,
            frames: 3,
            points: 6,
            control: [[-6.0, 0.5], [-2.0, 0.5], [2.0, 0.5], [6.0, 0.5]],
            start: 0.5,
            step: 1.0,
            orientation: 0,
            margin: 1.0,
            fork: None,
        };
        let scene = generate_scene(&spec).unwrap();
        let gt = &scene.trajectory_px;
        for w in gt.windows(2) {
            assert!((w[1][0] - w[0][0] - 1.0).abs() < 1e-9);
            assert!((w[1][1] - 8.0).abs() < 1e-12);
        }
        assert!((gt[0][0] - (1.5 + 3.5)).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = sampler(false).sample(3, 0).unwrap();
        spec.step = 10.0;
        assert!(matches!(generate_scene(&spec), Err(SynthError::Spec(_))));
        let mut spec = sampler(false).sample(3, 0).unwrap();
        spec.control[0] = [7.4, 0.0];
        assert!(matches!(generate_scene(&spec), Err(SynthError::Spec(_))));
    }

    fn to_state(frames: &[u8]) -> VideoClipState {
        normalize_frames(frames, 3, 16, 16).unwrap()
    }

    #[test]
    fn rotated_spec_renders_the_rotated_clip() {
        for bimodal in [false, true] {
            for seed in 0..24 {
                let spec = sampler(bimodal).sample(seed, (seed % 6) as usize).unwrap();
                let base = generate_scene(&spec).unwrap();
                let gt = normalize_trajectory(&base.trajectory_px, 16, 16).unwrap();
                for k in 1..4 {
                    let turned = generate_scene(&spec.rotated(k)).unwrap();
                    assert_eq!(to_state(&turned.frames), to_state(&base.frames).rotate_quarter(k));
                    let tgt = normalize_trajectory(&turned.trajectory_px, 16, 16).unwrap();
                    let want = gt.rotate_quarter(k);
                    for (a, b) in tgt.flat().iter().zip(want.flat()) {
                        assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn forks_are_mirror_images_with_real_separation() {
        for seed in 0..20 {
            let spec = sampler(true).sample(seed, 1).unwrap();
            let scene = generate_scene(&spec).unwrap();
            let alt = scene.alt_trajectory_px.unwrap();
            let sep: f64 = scene
                .trajectory_px
                .iter()
                .zip(&alt)
                .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .sum::<f64>()
                / alt.len() as f64;
            assert!(sep >= 1.5);
            let mut other = spec.clone();
            other.fork = spec.fork.map(|m| !m);
            let swapped = generate_scene(&other).unwrap();
            assert_eq!(swapped.frames, generate_scene(&spec).unwrap().frames, "modes are visually indistinguishable");
            assert_eq!(swapped.trajectory_px, alt);
        }
    }
}
