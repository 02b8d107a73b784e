//! Dataset generation, on-disk layout and validated loading.
//!
//! Layout under the dataset root:
//! `<split>/<clip_id>/frame_<i>.png`, `manifest.json` and
//! `checksums.sha256` (one SHA-256 per artifact file).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eqdiff_core::metrics::LabeledClip;
use eqdiff_core::{normalize_frames, normalize_trajectory, StateActionPair, TrajectoryAction, VideoClipState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SynthError};
use crate::profile::{profile, DEFAULT_OOC_PROFILES, DEFAULT_TRAIN_PROFILES};
use crate::scene::{generate_scene, SceneSampler, SceneSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKSUM_FILE: &str = "checksums.sha256";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    InContextTest,
    OutContextTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::InContextTest, Split::OutContextTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::InContextTest => "in_context_test",
            Split::OutContextTest => "out_context_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| SynthError::Config(format!("unknown split '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub in_context_test: usize,
    pub out_context_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 1216,
            val: 135,
            in_context_test: 642,
            out_context_test: 393,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::InContextTest => self.in_context_test,
            Split::OutContextTest => self.out_context_test,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub size: usize,
    pub frames: usize,
    pub points: usize,
    /// Curve margin in pixels; defaults to 8 px per 128 px of image size.
    pub margin: Option<f64>,
    pub counts: SplitCounts,
    pub train_profiles: Vec<usize>,
    pub ooc_profiles: Vec<usize>,
    pub bimodal: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 16,
            frames: 3,
            points: 6,
            margin: None,
            counts: SplitCounts::default(),
            train_profiles: DEFAULT_TRAIN_PROFILES.to_vec(),
            ooc_profiles: DEFAULT_OOC_PROFILES.to_vec(),
            bimodal: false,
        }
    }
}

impl GenConfig {
    pub fn margin_px(&self) -> f64 {
        self.margin
            .unwrap_or_else(|| (8.0 * self.size as f64 / 128.0).round().max(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_profiles.is_empty() || self.ooc_profiles.is_empty() {
            return Err(SynthError::Config("both profile lists must be non-empty".into()));
        }
        if let Some(p) = self.train_profiles.iter().chain(&self.ooc_profiles).find(|&&p| profile(p).is_none()) {
            return Err(SynthError::Config(format!("unknown context profile {p}")));
        }
        let train: HashSet<_> = self.train_profiles.iter().collect();
        let shared: Vec<_> = self.ooc_profiles.iter().filter(|p| train.contains(p)).collect();
        if !shared.is_empty() {
            return Err(SynthError::Config(format!(
                "out-of-context profiles {shared:?} are also training profiles"
            )));
        }
        if self.size < 8 || self.frames < 1 || self.points < 1 {
            return Err(SynthError::Config("need size >= 8, frames >= 1 and points >= 1".into()));
        }
        if self.bimodal && self.frames < 2 {
            return Err(SynthError::Config("the bimodal variant needs at least two frames".into()));
        }
        Ok(())
    }

    fn sampler(&self) -> SceneSampler {
        SceneSampler {
            size: self.size,
            frames: self.frames,
            points: self.points,
            margin: self.margin_px(),
            bimodal: self.bimodal,
        }
    }

    fn profiles_for(&self, split: Split) -> &[usize] {
        match split {
            Split::OutContextTest => &self.ooc_profiles,
            _ => &self.train_profiles,
        }
    }
}

/// Shape and provenance shared by every entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub frames: usize,
    pub points: usize,
    pub height: usize,
    pub width: usize,
    /// The marker advances one curve step per frame and each future
    /// waypoint is one further step.
    pub fps_semantics: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
}

impl GlobalConfig {
    pub fn new(frames: usize, points: usize, size: usize, source: &str) -> Self {
        Self {
            frames,
            points,
            height: size,
            width: size,
            fps_semantics: "one curve step per frame; waypoints continue at the same spacing".into(),
            source: source.into(),
            generator: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Paths relative to the dataset root.
    pub frames: Vec<String>,
    pub trajectory_px: Vec<[f64; 2]>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_trajectory_px: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: GlobalConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// A clip ready to be written: raw `(L, H, W, 3)` bytes plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub split: Split,
    pub pixels: Vec<u8>,
    pub trajectory_px: Vec<[f64; 2]>,
    pub alt_trajectory_px: Option<Vec<[f64; 2]>>,
    pub scene: Option<SceneSpec>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th scene of a split.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix(splitmix(seed ^ ((split as u64) << 56)) ^ index as u64)
}

fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Renders every clip of every split in memory.
pub fn generate_records(cfg: &GenConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let sampler = cfg.sampler();
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..cfg.counts.get(s)).map(move |i| (s, i)))
        .collect();
    parallel_map(&jobs, |&(split, i)| -> Result<ClipRecord> {
        let seed = scene_seed(cfg.seed, split, i);
        let choices = cfg.profiles_for(split);
        let pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fc0_ffee).random_range(0..choices.len());
        let spec = sampler.sample(seed, choices[pick])?;
        let scene = generate_scene(&spec)?;
        Ok(ClipRecord {
            clip_id: format!("{}_{i:05}", split.name()),
            split,
            pixels: scene.frames,
            trajectory_px: scene.trajectory_px,
            alt_trajectory_px: scene.alt_trajectory_px,
            scene: Some(spec),
        })
    })
    .into_iter()
    .collect()
}

/// Generates and writes a full dataset under `root`.
pub fn generate_dataset(root: &Path, cfg: &GenConfig, overwrite: bool) -> Result<DatasetManifest> {
    let records = generate_records(cfg)?;
    let mut global = GlobalConfig::new(cfg.frames, cfg.points, cfg.size, "synthbench");
    global.generator = Some(cfg.clone());
    write_dataset(root, global, &records, overwrite)
}

fn encode_png(pixels: &[u8], size: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| SynthError::Image {
        path: PathBuf::from("<memory>"),
        detail: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(pixels).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(out)
}

fn decode_png(bytes: &[u8], size: usize) -> std::result::Result<Vec<u8>, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if (info.width as usize, info.height as usize) != (size, size) {
        return Err(format!("image is {}x{}, expected {size}x{size}", info.width, info.height));
    }
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err("image must be 8-bit RGB".into());
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(frame.buffer_size());
    Ok(buf)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn safe_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') && id != "." && id != ".."
}

/// Writes records as PNG frames with a manifest and checksum file.
pub fn write_dataset(root: &Path, config: GlobalConfig, records: &[ClipRecord], overwrite: bool) -> Result<DatasetManifest> {
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(SynthError::Config(format!("{} already exists", manifest_path.display())));
    }
    let size = config.height;
    let mut seen = HashSet::new();
    for r in records {
        if !safe_id(&r.clip_id) {
            return Err(SynthError::Config(format!("clip id '{}' is not a safe file name", r.clip_id)));
        }
        if !seen.insert(r.clip_id.as_str()) {
            return Err(SynthError::Config(format!("duplicate clip id '{}'", r.clip_id)));
        }
        if r.pixels.len() != config.frames * size * size * 3 {
            return Err(SynthError::Config(format!("clip '{}' has the wrong pixel count", r.clip_id)));
        }
    }
    let written = parallel_map(records, |r| -> Result<(ManifestEntry, Vec<(String, String)>)> {
        let dir = format!("{}/{}", r.split.name(), r.clip_id);
        fs::create_dir_all(root.join(&dir)).map_err(|e| SynthError::io(root.join(&dir), e))?;
        let frame_bytes = size * size * 3;
        let mut frames = Vec::with_capacity(config.frames);
        let mut sums = Vec::with_capacity(config.frames);
        for (i, px) in r.pixels.chunks(frame_bytes).enumerate() {
            let rel = format!("{dir}/frame_{i}.png");
            let bytes = encode_png(px, size)?;
            fs::write(root.join(&rel), &bytes).map_err(|e| SynthError::io(root.join(&rel), e))?;
            sums.push((rel.clone(), sha256_hex(&bytes)));
            frames.push(rel);
        }
        let entry = ManifestEntry {
            clip_id: r.clip_id.clone(),
            frames,
            trajectory_px: r.trajectory_px.clone(),
            split: r.split,
            scene_seed: r.scene.as_ref().map(|s| s.seed),
            profile: r.scene.as_ref().map(|s| s.profile),
            scene: r.scene.clone(),
            alt_trajectory_px: r.alt_trajectory_px.clone(),
        };
        Ok((entry, sums))
    });
    let mut entries = Vec::with_capacity(records.len());
    let mut sums = BTreeMap::new();
    for w in written {
        let (entry, s) = w?;
        entries.push(entry);
        sums.extend(s);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config,
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&manifest_path, &text).map_err(|e| SynthError::io(&manifest_path, e))?;
    sums.insert(MANIFEST_FILE.to_string(), sha256_hex(text.as_bytes()));
    let listing: String = sums.iter().map(|(p, h)| format!("{h}  {p}\n")).collect();
    fs::write(root.join(CHECKSUM_FILE), listing).map_err(|e| SynthError::io(root.join(CHECKSUM_FILE), e))?;
    Ok(manifest)
}

/// Trajectory problems in a manifest: wrong length, non-finite or outside
/// the image.
pub fn audit_bounds(manifest: &DatasetManifest) -> Vec<(String, String)> {
    let (w, h, n) = (manifest.config.width as f64, manifest.config.height as f64, manifest.config.points);
    let mut out = Vec::new();
    for e in &manifest.entries {
        let mut check = |label: &str, pts: &[[f64; 2]]| {
            if pts.len() != n {
                out.push((e.clip_id.clone(), format!("{label} has {} points, expected {n}", pts.len())));
            }
            if let Some((i, p)) = pts
                .iter()
                .enumerate()
                .find(|(_, p)| !(p[0] >= 0.0 && p[0] <= w - 1.0 && p[1] >= 0.0 && p[1] <= h - 1.0))
            {
                out.push((e.clip_id.clone(), format!("{label} point {i} ({}, {}) is outside the image", p[0], p[1])));
            }
        };
        check("trajectory", &e.trajectory_px);
        if let Some(alt) = &e.alt_trajectory_px {
            check("alternate trajectory", alt);
        }
    }
    out
}

/// A validated dataset held in memory as raw bytes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pixels: Vec<Vec<u8>>,
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| SynthError::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| SynthError::Manifest {
        path: path.to_path_buf(),
        detail: format!("line {}: {e}", e.line()),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(SynthError::Manifest {
            path: path.to_path_buf(),
            detail: format!("unsupported format version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

fn read_checksums(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| SynthError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once("  ")
                .map(|(h, p)| (p.to_string(), h.to_string()))
                .ok_or_else(|| SynthError::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected '<sha256>  <path>'", i + 1),
                })
        })
        .collect()
}

/// Loads and validates a dataset; `path` is the manifest or its directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = read_manifest(&manifest_path)?;
    let sums = read_checksums(&root.join(CHECKSUM_FILE))?;
    let cfg = &manifest.config;
    if cfg.height != cfg.width || cfg.frames == 0 || cfg.points == 0 {
        return Err(SynthError::Manifest {
            path: manifest_path,
            detail: "config needs square frames, L >= 1 and N >= 1".into(),
        });
    }
    let mut problems = audit_bounds(&manifest);
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.clip_id.as_str()) {
            problems.push((e.clip_id.clone(), "duplicate clip id".into()));
        }
    }
    let frame_bytes = cfg.height * cfg.width * 3;
    let loaded = parallel_map(&manifest.entries, |e| {
        let mut errs = Vec::new();
        let mut px = Vec::with_capacity(cfg.frames * frame_bytes);
        if e.frames.len() != cfg.frames {
            errs.push(format!("has {} frames, expected {}", e.frames.len(), cfg.frames));
        }
        for f in &e.frames {
            let bytes = match fs::read(root.join(f)) {
                Ok(b) => b,
                Err(err) => {
                    errs.push(format!("{f}: {err}"));
                    continue;
                }
            };
            match sums.get(f) {
                None => errs.push(format!("{f}: no checksum recorded")),
                Some(h) if *h != sha256_hex(&bytes) => errs.push(format!("{f}: checksum mismatch")),
                _ => {}
            }
            match decode_png(&bytes, cfg.height) {
                Ok(p) => px.extend(p),
                Err(err) => errs.push(format!("{f}: {err}")),
            }
        }
        (px, errs)
    });
    let mut pixels = Vec::with_capacity(loaded.len());
    for (e, (px, errs)) in manifest.entries.iter().zip(loaded) {
        problems.extend(errs.into_iter().map(|m| (e.clip_id.clone(), m)));
        pixels.push(px);
    }
    if !problems.is_empty() {
        return Err(SynthError::Load { problems });
    }
    Ok(Dataset {
        root,
        manifest,
        pixels,
    })
}

impl Dataset {
    pub fn config(&self) -> &GlobalConfig {
        &self.manifest.config
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest.entries[i].split == split).collect()
    }

    pub fn entry(&self, i: usize) -> &ManifestEntry {
        &self.manifest.entries[i]
    }

    pub fn raw_frames(&self, i: usize) -> &[u8] {
        &self.pixels[i]
    }

    pub fn state(&self, i: usize) -> Result<VideoClipState> {
        let c = &self.manifest.config;
        Ok(normalize_frames(&self.pixels[i], c.frames, c.height, c.width)?)
    }

    pub fn action(&self, i: usize) -> Result<TrajectoryAction> {
        let c = &self.manifest.config;
        Ok(normalize_trajectory(&self.manifest.entries[i].trajectory_px, c.height, c.width)?)
    }

    pub fn alt_action(&self, i: usize) -> Result<Option<TrajectoryAction>> {
        let c = &self.manifest.config;
        self.manifest.entries[i]
            .alt_trajectory_px
            .as_ref()
            .map(|p| Ok(normalize_trajectory(p, c.height, c.width)?))
            .transpose()
    }

    pub fn pairs(&self, split: Split) -> Result<Vec<StateActionPair>> {
        self.indices(split)
            .into_iter()
            .map(|i| Ok(StateActionPair::clean(self.state(i)?, self.action(i)?)))
            .collect()
    }

    pub fn labeled(&self, split: Split) -> Result<Vec<LabeledClip>> {
        self.labeled_rotated(split, 0)
    }

    /// Clips and labels turned by `quarter_turns` x 90 degrees. Every
    /// rotated pair is itself a valid scene of the generator.
    pub fn labeled_rotated(&self, split: Split, quarter_turns: usize) -> Result<Vec<LabeledClip>> {
        self.indices(split)
            .into_iter()
            .map(|i| {
                Ok(LabeledClip {
                    clip_id: self.manifest.entries[i].clip_id.clone(),
                    state: self.state(i)?.rotate_quarter(quarter_turns),
                    gt: self.action(i)?.rotate_quarter(quarter_turns),
                })
            })
            .collect()
    }
}
