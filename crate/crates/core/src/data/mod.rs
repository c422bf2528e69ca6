//! Scene ingestion, preprocessing and batching.
//!
//! Scenes follow the public 7-Scenes directory layout: a per-scene
//! directory with `TrainSplit.txt` / `TestSplit.txt` listing sequences
//! (both `sequenceN` and `seq-NN` spellings are accepted), and `seq-XX/`
//! folders holding `frame-NNNNNN.color.png` plus `frame-NNNNNN.pose.txt`
//! (a row-major 4x4 homogeneous camera-to-world matrix as 4 text lines).
//! Pose matrices are ingested as stored, without inversion.
//!
//! Preprocessing: rescale so the short side hits a target (bilinear, long
//! side rounded to nearest), crop (random in training, centered at test
//! time), then per-channel `(x - mean) / std` normalization with per-scene
//! statistics computed over the rescaled training images only.

pub mod fixture;

pub use fixture::generate_fixture_scene;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{homogeneous_to_pose, GeometryError, Pose};
use crate::Elem;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene layout problem: {reason}")]
    LayoutError { reason: String },
    #[error("failed to parse pose file {path}: {reason}")]
    PoseParseError { path: PathBuf, reason: String },
    #[error("empty input set")]
    EmptySet,
    #[error("channel {channel} has zero variance (mean {mean:?})")]
    ZeroVariance { channel: usize, mean: [f64; 3] },
    #[error("image {got:?} smaller than crop {needed} after rescale")]
    TooSmall { needed: usize, got: (usize, usize) },
    #[error("training-mode preprocessing needs a random stream")]
    RngRequired,
    #[error("invalid preprocess config: {reason}")]
    InvalidPreprocess { reason: String },
    #[error("failed to read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One dataset frame: the image on disk plus its ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image_path: PathBuf,
    pub pose: Pose,
    pub scene: String,
    pub sequence: String,
    pub frame_index: u32,
}

/// Train/test partition of one scene.
#[derive(Debug, Clone, Default)]
pub struct SceneSplit {
    pub train: Vec<FrameRecord>,
    pub test: Vec<FrameRecord>,
}

/// Per-channel intensity statistics of a scene's training images,
/// on the [0, 1] scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl SceneStats {
    /// Statistics that leave intensities unchanged; occasionally useful in
    /// tests.
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

/// Cached statistics file stored beside the scene directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneStatsFile {
    pub scene: String,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    TrainRandomCrop,
    TestCenterCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub rescale_short_side: usize,
    pub crop: usize,
    pub mode: CropMode,
}

impl PreprocessConfig {
    pub fn new(rescale_short_side: usize, crop: usize, mode: CropMode) -> Result<Self, DataError> {
        if crop == 0 || rescale_short_side == 0 || crop > rescale_short_side {
            return Err(DataError::InvalidPreprocess {
                reason: format!("need 0 < crop ({crop}) <= rescale_short_side ({rescale_short_side})"),
            });
        }
        Ok(Self { rescale_short_side, crop, mode })
    }

    pub fn train(rescale_short_side: usize, crop: usize) -> Result<Self, DataError> {
        Self::new(rescale_short_side, crop, CropMode::TrainRandomCrop)
    }

    pub fn test(rescale_short_side: usize, crop: usize) -> Result<Self, DataError> {
        Self::new(rescale_short_side, crop, CropMode::TestCenterCrop)
    }

    pub fn with_mode(&self, mode: CropMode) -> Self {
        Self { mode, ..*self }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { rescale_short_side: 256, crop: 224, mode: CropMode::TrainRandomCrop }
    }
}

/// Loads an 8-bit RGB PNG as `[H, W, 3]` intensities in [0, 1].
pub fn load_image(path: &Path) -> Result<Array3<f64>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Output dimensions after rescaling the short side to `short`:
/// the long side is `round(long * short / short_in)`.
pub fn rescaled_dims(h: usize, w: usize, short: usize) -> (usize, usize) {
    if h <= w {
        (short, ((w as f64) * (short as f64) / (h as f64)).round() as usize)
    } else {
        (((h as f64) * (short as f64) / (w as f64)).round() as usize, short)
    }
}

/// Bilinear rescale so the shorter side equals `short`, preserving aspect
/// ratio. Sample positions follow the half-pixel convention
/// `src = (dst + 0.5) * scale - 0.5`, clamped to the image.
pub fn rescale_to_short_side(image: &Array3<f64>, short: usize) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let (nh, nw) = rescaled_dims(h, w, short);
    if (nh, nw) == (h, w) {
        return image.clone();
    }
    let mut out = Array3::<f64>::zeros((nh, nw, c));
    let scale_y = h as f64 / nh as f64;
    let scale_x = w as f64 / nw as f64;
    for oy in 0..nh {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..nw {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
                let bot = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Center-crop offsets: `floor((dim - crop) / 2)` per axis.
pub fn center_crop_offsets(h: usize, w: usize, crop: usize) -> (usize, usize) {
    ((h - crop) / 2, (w - crop) / 2)
}

/// Rescale, crop and normalize one image into a `[1, 3, crop, crop]`
/// network input. Training mode draws the crop offsets (row first, then
/// column) from `rng`; test mode is a pure function of the inputs.
pub fn preprocess<T: Elem>(
    image: &Array3<f64>,
    stats: &SceneStats,
    cfg: &PreprocessConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Array4<T>, DataError> {
    let rescaled = rescale_to_short_side(image, cfg.rescale_short_side);
    let (rh, rw, _) = rescaled.dim();
    if rh < cfg.crop || rw < cfg.crop {
        return Err(DataError::TooSmall { needed: cfg.crop, got: (rh, rw) });
    }
    let (oy, ox) = match cfg.mode {
        CropMode::TestCenterCrop => center_crop_offsets(rh, rw, cfg.crop),
        CropMode::TrainRandomCrop => {
            let rng = rng.ok_or(DataError::RngRequired)?;
            let oy = Uniform::new_inclusive(0, rh - cfg.crop).sample(rng);
            let ox = Uniform::new_inclusive(0, rw - cfg.crop).sample(rng);
            (oy, ox)
        }
    };
    let mut out = Array4::<T>::zeros((1, 3, cfg.crop, cfg.crop));
    for ch in 0..3 {
        let mean = stats.mean[ch];
        let std = stats.std[ch];
        for r in 0..cfg.crop {
            for c in 0..cfg.crop {
                let v = (rescaled[[oy + r, ox + c, ch]] - mean) / std;
                out[[0, ch, r, c]] = T::from_f64(v);
            }
        }
    }
    Ok(out)
}

/// Stacks per-frame `[1, C, H, W]` tensors into one standard-layout batch.
pub fn stack_batch<T: Elem>(items: &[Array4<T>]) -> Array4<T> {
    assert!(!items.is_empty(), "cannot stack an empty batch");
    let (_, c, h, w) = items[0].dim();
    let mut out = Array4::<T>::zeros((items.len(), c, h, w));
    for (i, item) in items.iter().enumerate() {
        out.slice_mut(ndarray::s![i..i + 1, .., .., ..]).assign(item);
    }
    out
}

/// Per-channel mean and population standard deviation over every pixel of
/// every rescaled training image.
pub fn compute_scene_stats(
    records: &[FrameRecord],
    rescale_short_side: usize,
) -> Result<SceneStats, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptySet);
    }
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0usize;
    for record in records {
        let image = load_image(&record.image_path)?;
        let rescaled = rescale_to_short_side(&image, rescale_short_side);
        let (h, w, _) = rescaled.dim();
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let v = rescaled[[r, c, ch]];
                    sum[ch] += v;
                    sum_sq[ch] += v * v;
                }
            }
        }
        count += h * w;
    }
    let n = count as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for ch in 0..3 {
        mean[ch] = sum[ch] / n;
        let var = (sum_sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
        std[ch] = var.sqrt();
    }
    for (ch, s) in std.iter().enumerate() {
        if *s < 1e-9 {
            return Err(DataError::ZeroVariance { channel: ch, mean });
        }
    }
    Ok(SceneStats { mean, std })
}

/// Path of the cached statistics JSON, beside the scene directory.
pub fn stats_cache_path(root: &Path, scene: &str) -> PathBuf {
    root.join(format!("{scene}.stats.json"))
}

pub fn save_scene_stats(root: &Path, scene: &str, stats: &SceneStats) -> Result<(), DataError> {
    let file = SceneStatsFile { scene: scene.to_string(), mean: stats.mean, std: stats.std };
    let json = serde_json::to_string_pretty(&file).expect("stats serialize");
    fs::write(stats_cache_path(root, scene), json + "\n")?;
    Ok(())
}

pub fn load_scene_stats(root: &Path, scene: &str) -> Result<SceneStats, DataError> {
    let path = stats_cache_path(root, scene);
    let text = fs::read_to_string(&path)?;
    let file: SceneStatsFile = serde_json::from_str(&text).map_err(|e| DataError::LayoutError {
        reason: format!("stats cache {path:?}: {e}"),
    })?;
    Ok(SceneStats { mean: file.mean, std: file.std })
}

/// Normalizes a split-file line to a `seq-NN` directory name. Accepts the
/// `sequenceN` and `seq-NN` spellings.
fn parse_sequence_name(line: &str) -> Option<String> {
    let line = line.trim();
    if line.is_empty() {
        return None;
    }
    let number = line
        .strip_prefix("sequence")
        .or_else(|| line.strip_prefix("seq-"))?;
    let n: u32 = number.parse().ok()?;
    Some(format!("seq-{n:02}"))
}

fn read_split_file(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(|_| DataError::LayoutError {
        reason: format!("missing split file {path:?}"),
    })?;
    let mut sequences = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_sequence_name(line) {
            Some(seq) => sequences.push(seq),
            None => {
                return Err(DataError::LayoutError {
                    reason: format!("unparseable sequence name '{line}' in {path:?}"),
                })
            }
        }
    }
    Ok(sequences)
}

fn parse_pose_file(path: &Path) -> Result<Pose, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::PoseParseError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|token| {
            token.parse::<f64>().map_err(|e| DataError::PoseParseError {
                path: path.to_path_buf(),
                reason: format!("bad number '{token}': {e}"),
            })
        })
        .collect::<Result<_, _>>()?;
    if values.len() != 16 {
        return Err(DataError::PoseParseError {
            path: path.to_path_buf(),
            reason: format!("expected 16 values, found {}", values.len()),
        });
    }
    let mut m = [[0.0f64; 4]; 4];
    for (i, v) in values.iter().enumerate() {
        m[i / 4][i % 4] = *v;
    }
    homogeneous_to_pose(&m).map_err(|e: GeometryError| DataError::PoseParseError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn scan_sequence(
    scene_dir: &Path,
    scene: &str,
    sequence: &str,
) -> Result<Vec<FrameRecord>, DataError> {
    let seq_dir = scene_dir.join(sequence);
    if !seq_dir.is_dir() {
        return Err(DataError::LayoutError {
            reason: format!("sequence directory {seq_dir:?} does not exist"),
        });
    }
    let mut records = Vec::new();
    for entry in fs::read_dir(&seq_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(".pose.txt") else {
            continue;
        };
        let Some(number) = stem.strip_prefix("frame-") else {
            continue;
        };
        let frame_index: u32 = number.parse().map_err(|_| DataError::LayoutError {
            reason: format!("unparseable frame index in {name}"),
        })?;
        let pose = parse_pose_file(&entry.path())?;
        records.push(FrameRecord {
            image_path: seq_dir.join(format!("{stem}.color.png")),
            pose,
            scene: scene.to_string(),
            sequence: sequence.to_string(),
            frame_index,
        });
    }
    if records.is_empty() {
        return Err(DataError::LayoutError {
            reason: format!("sequence directory {seq_dir:?} holds no frames"),
        });
    }
    records.sort_by(|a, b| a.frame_index.cmp(&b.frame_index));
    Ok(records)
}

/// Reads a scene directory into train and test frame lists, ordered by
/// (sequence, frame index).
pub fn scan_scene(root: &Path, scene: &str) -> Result<SceneSplit, DataError> {
    let scene_dir = root.join(scene);
    if !scene_dir.is_dir() {
        return Err(DataError::LayoutError {
            reason: format!("scene directory {scene_dir:?} does not exist"),
        });
    }
    let train_seqs = read_split_file(&scene_dir.join("TrainSplit.txt"))?;
    let test_seqs = read_split_file(&scene_dir.join("TestSplit.txt"))?;
    for seq in &train_seqs {
        if test_seqs.contains(seq) {
            return Err(DataError::LayoutError {
                reason: format!("sequence {seq} appears in both splits"),
            });
        }
    }
    let mut split = SceneSplit::default();
    let scan_into = |seqs: &[String], out: &mut Vec<FrameRecord>| -> Result<(), DataError> {
        let mut sorted = seqs.to_vec();
        sorted.sort();
        for seq in &sorted {
            out.extend(scan_sequence(&scene_dir, scene, seq)?);
        }
        Ok(())
    };
    scan_into(&train_seqs, &mut split.train)?;
    scan_into(&test_seqs, &mut split.test)?;
    Ok(split)
}

/// Shuffles the records with a permutation determined by `(seed, epoch)`
/// and chunks them into batches; the final short batch is kept.
pub fn epoch_batches(
    records: &[FrameRecord],
    batch_size: usize,
    seed: u64,
    epoch_index: usize,
) -> Vec<Vec<FrameRecord>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = shuffle_rng(seed, epoch_index);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| records[i].clone()).collect())
        .collect()
}

/// Random stream for the epoch shuffle. Crop sampling and dropout use
/// sibling streams derived from the same seed (see `training`).
pub fn shuffle_rng(seed: u64, epoch_index: usize) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch_index as u64);
    rng
}
