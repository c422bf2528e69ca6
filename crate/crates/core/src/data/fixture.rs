//! Synthetic scene generator for desk-scale tests.
//!
//! Produces a scene directory in the 7-Scenes layout whose images are a
//! deterministic function of the ground-truth pose: a color gradient
//! driven by the quaternion plus a patterned quad whose position and size
//! follow the translation. Even-indexed sequences go to the train split,
//! odd-indexed ones to the test split.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::geometry::{quat_to_rotmat, Pose, Quaternion, Translation};

use super::DataError;

/// Draws a pose with a modest rotation (so the canonical hemisphere is
/// stable) and a translation inside the unit box.
fn sample_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle: f64 = rng.gen_range(0.0..0.6);
    let half = angle / 2.0;
    let s = half.sin();
    let q = Quaternion::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s);
    let t = Translation::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    Pose::new(q, t)
}

/// Renders the deterministic pose-dependent test pattern.
pub fn render_pose_image(pose: &Pose, height: usize, width: usize) -> image::RgbImage {
    let q = pose.q;
    let t = pose.t;
    let mut img = image::RgbImage::new(width as u32, height as u32);
    // quad center and half-size in centered [-0.5, 0.5] coordinates
    let cu = 0.3 * t.tx;
    let cv = 0.3 * t.ty;
    let half = 0.10 + 0.05 * t.tz;
    for r in 0..height {
        let v = if height > 1 { r as f64 / (height - 1) as f64 - 0.5 } else { 0.0 };
        for c in 0..width {
            let u = if width > 1 { c as f64 / (width - 1) as f64 - 0.5 } else { 0.0 };
            // orientation-driven gradients, one mix per channel
            let mut rgb = [
                0.5 + 0.8 * (q.x * u + q.y * v),
                0.5 + 0.8 * (q.z * u - q.x * v),
                0.5 + 0.4 * (q.y * u - q.z * v) + 0.2 * (q.w - 0.9),
            ];
            // translation-driven patterned quad (concentric square rings)
            let du = (u - cu).abs();
            let dv = (v - cv).abs();
            let d = du.max(dv);
            if d < half {
                let ring = (d / half * 3.0).floor() as i64;
                let delta = if ring % 2 == 0 { 0.35 } else { -0.35 };
                for ch in &mut rgb {
                    *ch += delta;
                }
            }
            let px = image::Rgb([
                (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            img.put_pixel(c as u32, r as u32, px);
        }
    }
    img
}

fn write_pose_file(path: &Path, pose: &Pose) -> Result<(), DataError> {
    let r = quat_to_rotmat(&pose.q).expect("generated quaternions are unit");
    let t = pose.t.as_array();
    let mut text = String::new();
    for i in 0..3 {
        text.push_str(&format!("{} {} {} {}\n", r[i][0], r[i][1], r[i][2], t[i]));
    }
    text.push_str("0 0 0 1\n");
    fs::write(path, text)?;
    Ok(())
}

/// Writes a complete synthetic scene under `scene_dir` (created if
/// needed). The directory is byte-identical for identical arguments.
pub fn generate_fixture_scene(
    scene_dir: &Path,
    n_sequences: usize,
    frames_per_seq: usize,
    image_hw: (usize, usize),
    seed: u64,
) -> Result<(), DataError> {
    if n_sequences == 0 || frames_per_seq == 0 {
        return Err(DataError::LayoutError {
            reason: "fixture needs at least one sequence and one frame".to_string(),
        });
    }
    fs::create_dir_all(scene_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (height, width) = image_hw;

    let mut train_lines = String::new();
    let mut test_lines = String::new();
    for si in 0..n_sequences {
        // sequences are 1-based: split line "sequenceN" maps to seq-0N
        let seq_name = format!("seq-{:02}", si + 1);
        let seq_dir = scene_dir.join(&seq_name);
        fs::create_dir_all(&seq_dir)?;
        let line = format!("sequence{}\n", si + 1);
        if si % 2 == 0 {
            train_lines.push_str(&line);
        } else {
            test_lines.push_str(&line);
        }
        for fi in 0..frames_per_seq {
            let pose = sample_pose(&mut rng);
            write_pose_file(&seq_dir.join(format!("frame-{fi:06}.pose.txt")), &pose)?;
            let img = render_pose_image(&pose, height, width);
            img.save(seq_dir.join(format!("frame-{fi:06}.color.png")))
                .map_err(|e| DataError::Image {
                    path: seq_dir.join(format!("frame-{fi:06}.color.png")),
                    reason: e.to_string(),
                })?;
        }
    }
    fs::write(scene_dir.join("TrainSplit.txt"), train_lines)?;
    fs::write(scene_dir.join("TestSplit.txt"), test_lines)?;
    Ok(())
}
