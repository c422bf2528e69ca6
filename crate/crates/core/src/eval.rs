//! Test-set evaluation and reporting.
//!
//! Per frame: center-crop preprocessing, eval-mode forward, quaternion
//! normalization, then translation error (meters) and angular error
//! (degrees) against ground truth. Scenes are summarized by their median
//! errors; the overall row is the unweighted mean of per-scene medians.
//!
//! CSV schemas (UTF-8, LF, floats with 6 significant digits):
//!   errors:    scene,sequence,frame_index,t_err_m,q_err_deg
//!   summary:   scene,n_frames,median_t_m,median_q_deg  (+ final AVERAGE row)
//!   histogram: edge,value

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{load_image, preprocess, CropMode, DataError, FrameRecord, PreprocessConfig, SceneStats};
use crate::geometry::{angular_error_deg, quat_normalize, translation_error_m, Quaternion};
use crate::model::{Model, ModelError};
use crate::Elem;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("bin edges must be strictly ascending")]
    UnsortedEdges,
    #[error("frame {scene}/{sequence}/{frame_index}: {reason}")]
    Frame {
        scene: String,
        sequence: String,
        frame_index: u32,
        reason: String,
        /// Numerical failure (degenerate prediction) as opposed to a
        /// data problem (unreadable image); drives the CLI exit code.
        numeric: bool,
    },
    #[error("malformed CSV {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors of one evaluated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameError {
    pub sequence: String,
    pub frame_index: u32,
    pub t_err_m: f64,
    pub q_err_deg: f64,
}

/// Per-frame error lists for one scene, in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameErrors {
    pub scene: String,
    pub frames: Vec<FrameError>,
}

impl FrameErrors {
    pub fn t_errors(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t_err_m).collect()
    }

    pub fn q_errors(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.q_err_deg).collect()
    }
}

/// One scene's medians.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSummary {
    pub scene: String,
    pub n_frames: usize,
    pub median_t_m: f64,
    pub median_q_deg: f64,
}

/// Per-scene medians plus their unweighted average.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub scenes: Vec<SceneSummary>,
    pub average_t_m: f64,
    pub average_q_deg: f64,
}

/// Normalized cumulative error histogram: `cdf[i]` is the fraction of
/// errors `<= bin_edges[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeHistogram {
    pub bin_edges: Vec<f64>,
    pub cdf: Vec<f64>,
}

/// Runs the model over test frames and collects per-frame errors, in
/// frame order. Any per-frame failure aborts with the frame identity.
pub fn evaluate<T: Elem>(
    model: &Model<T>,
    records: &[FrameRecord],
    stats: &SceneStats,
    preprocess_cfg: &PreprocessConfig,
    batch_size: usize,
) -> Result<FrameErrors, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let cfg = preprocess_cfg.with_mode(CropMode::TestCenterCrop);
    let batch_size = batch_size.max(1);
    let mut frames = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size) {
        let mut images = Vec::with_capacity(chunk.len());
        for record in chunk {
            let frame_err = |reason: String| EvalError::Frame {
                scene: record.scene.clone(),
                sequence: record.sequence.clone(),
                frame_index: record.frame_index,
                reason,
                numeric: false,
            };
            let image = load_image(&record.image_path).map_err(|e| frame_err(e.to_string()))?;
            images.push(
                preprocess::<T>(&image, stats, &cfg, None).map_err(|e| frame_err(e.to_string()))?,
            );
        }
        let batch = crate::data::stack_batch(&images);
        let preds = model.forward_eval(&batch)?;
        for (i, record) in chunk.iter().enumerate() {
            let frame_err = |reason: String| EvalError::Frame {
                scene: record.scene.clone(),
                sequence: record.sequence.clone(),
                frame_index: record.frame_index,
                reason,
                numeric: true,
            };
            let pred = preds.prediction(i);
            let q_raw = Quaternion::new(pred.q_raw[0], pred.q_raw[1], pred.q_raw[2], pred.q_raw[3]);
            let q_hat = quat_normalize(&q_raw).map_err(|e| frame_err(e.to_string()))?;
            let q_err_deg =
                angular_error_deg(&q_hat, &record.pose.q).map_err(|e| frame_err(e.to_string()))?;
            let t_hat = crate::geometry::Translation::new(pred.t[0], pred.t[1], pred.t[2]);
            let t_err_m = translation_error_m(&t_hat, &record.pose.t);
            if !t_err_m.is_finite() || !q_err_deg.is_finite() {
                return Err(frame_err("non-finite error".to_string()));
            }
            frames.push(FrameError {
                sequence: record.sequence.clone(),
                frame_index: record.frame_index,
                t_err_m,
                q_err_deg,
            });
        }
    }
    Ok(FrameErrors { scene: records[0].scene.clone(), frames })
}

/// Order-statistic median; even counts average the two middle values.
pub fn median(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite error values"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

fn scene_summary(errors: &FrameErrors) -> Result<SceneSummary, EvalError> {
    Ok(SceneSummary {
        scene: errors.scene.clone(),
        n_frames: errors.frames.len(),
        median_t_m: median(&errors.t_errors())?,
        median_q_deg: median(&errors.q_errors())?,
    })
}

/// Summarizes per-scene error lists into medians plus the average row.
pub fn summarize(per_scene: &[FrameErrors]) -> Result<EvalSummary, EvalError> {
    let summaries = per_scene
        .iter()
        .map(scene_summary)
        .collect::<Result<Vec<_>, _>>()?;
    summarize_scene_medians(summaries)
}

/// Builds the summary from already-computed per-scene medians; the
/// average row is their unweighted mean.
pub fn summarize_scene_medians(scenes: Vec<SceneSummary>) -> Result<EvalSummary, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = scenes.len() as f64;
    let average_t_m = scenes.iter().map(|s| s.median_t_m).sum::<f64>() / n;
    let average_q_deg = scenes.iter().map(|s| s.median_q_deg).sum::<f64>() / n;
    Ok(EvalSummary { scenes, average_t_m, average_q_deg })
}

fn check_edges(edges: &[f64]) -> Result<(), EvalError> {
    if edges.is_empty() {
        return Err(EvalError::UnsortedEdges);
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EvalError::UnsortedEdges);
    }
    Ok(())
}

/// Fraction of errors at or below each edge.
pub fn cumulative_histogram(
    errors: &[f64],
    bin_edges: &[f64],
) -> Result<CumulativeHistogram, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    check_edges(bin_edges)?;
    let n = errors.len() as f64;
    let cdf = bin_edges
        .iter()
        .map(|edge| errors.iter().filter(|e| **e <= *edge).count() as f64 / n)
        .collect();
    Ok(CumulativeHistogram { bin_edges: bin_edges.to_vec(), cdf })
}

/// Normalized right-open bin fractions `[edge_i, edge_{i+1})` plus a final
/// overflow bin `[last_edge, inf)`. Values below the first edge land in
/// the first bin, so the fractions always sum to 1.
pub fn plain_histogram(errors: &[f64], bin_edges: &[f64]) -> Result<Vec<f64>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    check_edges(bin_edges)?;
    let k = bin_edges.len();
    let mut counts = vec![0usize; k];
    for e in errors {
        let p = bin_edges.partition_point(|edge| edge <= e);
        let bin = if p == k { k - 1 } else { p.max(1) - 1 };
        counts[bin] += 1;
    }
    let n = errors.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Uniformly spaced histogram edges `0, step, 2*step, ..` up to and
/// including `max`.
pub fn uniform_edges(max: f64, step: f64) -> Vec<f64> {
    let count = (max / step).round() as usize;
    (0..=count).map(|i| i as f64 * step).collect()
}

/// Formats with 6 significant digits, in the style of C's `%.6g`
/// (fixed or scientific, trailing zeros trimmed).
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    // exponent after rounding to 6 significant digits
    let sci = format!("{:.5e}", v);
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        let trimmed = fixed.trim_end_matches('0').trim_end_matches('.');
        trimmed.to_string()
    } else {
        let (mantissa, _) = sci.split_at(sci.find('e').unwrap());
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{exp}")
    }
}

pub fn write_errors_csv(w: &mut impl Write, errors: &FrameErrors) -> std::io::Result<()> {
    writeln!(w, "scene,sequence,frame_index,t_err_m,q_err_deg")?;
    for f in &errors.frames {
        writeln!(
            w,
            "{},{},{},{},{}",
            errors.scene,
            f.sequence,
            f.frame_index,
            format_g6(f.t_err_m),
            format_g6(f.q_err_deg)
        )?;
    }
    Ok(())
}

/// Reads an error CSV back, grouping rows by scene in order of first
/// appearance.
pub fn read_errors_csv(path: &Path) -> Result<Vec<FrameErrors>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: String| EvalError::Csv { path: path.to_path_buf(), reason };
    let mut lines = text.lines();
    match lines.next() {
        Some("scene,sequence,frame_index,t_err_m,q_err_deg") => {}
        other => {
            return Err(bad(format!("unexpected header {other:?}")));
        }
    }
    let mut groups: Vec<FrameErrors> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", lineno + 2)));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))
        };
        let frame = FrameError {
            sequence: fields[1].to_string(),
            frame_index: fields[2]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?,
            t_err_m: parse_f(fields[3])?,
            q_err_deg: parse_f(fields[4])?,
        };
        match groups.iter_mut().find(|g| g.scene == fields[0]) {
            Some(group) => group.frames.push(frame),
            None => groups.push(FrameErrors { scene: fields[0].to_string(), frames: vec![frame] }),
        }
    }
    if groups.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(groups)
}

pub fn write_summary_csv(w: &mut impl Write, summary: &EvalSummary) -> std::io::Result<()> {
    writeln!(w, "scene,n_frames,median_t_m,median_q_deg")?;
    let mut total_frames = 0usize;
    for s in &summary.scenes {
        total_frames += s.n_frames;
        writeln!(
            w,
            "{},{},{},{}",
            s.scene,
            s.n_frames,
            format_g6(s.median_t_m),
            format_g6(s.median_q_deg)
        )?;
    }
    writeln!(
        w,
        "AVERAGE,{},{},{}",
        total_frames,
        format_g6(summary.average_t_m),
        format_g6(summary.average_q_deg)
    )?;
    Ok(())
}

/// Writes `(edge, value)` rows. For cumulative histograms `value` is the
/// cdf at the edge; for plain histograms it is the fraction of the bin
/// starting at the edge, the last row being the overflow bin.
pub fn write_histogram_csv(
    w: &mut impl Write,
    edges: &[f64],
    values: &[f64],
) -> std::io::Result<()> {
    writeln!(w, "edge,value")?;
    for (e, v) in edges.iter().zip(values.iter()) {
        writeln!(w, "{},{}", format_g6(*e), format_g6(*v))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_basics() {
        assert_eq!(median(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert!(matches!(median(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn median_matches_full_sort_oracle_and_permutation_invariance() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let values: Vec<f64> = (0..1001).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = sorted[500];
        assert_eq!(median(&values).unwrap(), oracle);

        let mut shuffled = values.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(median(&shuffled).unwrap(), median(&values).unwrap());
    }

    #[test]
    fn summarize_single_and_pair() {
        let one = SceneSummary { scene: "a".into(), n_frames: 3, median_t_m: 0.2, median_q_deg: 5.0 };
        let s = summarize_scene_medians(vec![one.clone()]).unwrap();
        assert_eq!(s.average_t_m, 0.2);
        assert_eq!(s.average_q_deg, 5.0);

        let two = SceneSummary { scene: "b".into(), n_frames: 5, median_t_m: 0.4, median_q_deg: 7.0 };
        let s = summarize_scene_medians(vec![one, two]).unwrap();
        assert!((s.average_t_m - 0.3).abs() < 1e-12);
        assert!((s.average_q_deg - 6.0).abs() < 1e-12);
    }

    #[test]
    fn summarize_from_frame_errors() {
        let errors = FrameErrors {
            scene: "x".into(),
            frames: vec![
                FrameError { sequence: "seq-01".into(), frame_index: 0, t_err_m: 0.1, q_err_deg: 1.0 },
                FrameError { sequence: "seq-01".into(), frame_index: 1, t_err_m: 0.3, q_err_deg: 3.0 },
                FrameError { sequence: "seq-01".into(), frame_index: 2, t_err_m: 0.2, q_err_deg: 5.0 },
            ],
        };
        let s = summarize(&[errors]).unwrap();
        assert_eq!(s.scenes[0].median_t_m, 0.2);
        assert_eq!(s.scenes[0].median_q_deg, 3.0);
        assert_eq!(s.average_t_m, 0.2);
    }

    #[test]
    fn cumulative_histogram_cases() {
        // everything below the first edge
        let h = cumulative_histogram(&[0.1, 0.2], &[0.5, 1.0]).unwrap();
        assert_eq!(h.cdf, vec![1.0, 1.0]);

        let h = cumulative_histogram(&[1.0, 2.0, 3.0], &[1.5, 3.5]).unwrap();
        assert!((h.cdf[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(h.cdf[1], 1.0);

        assert!(matches!(
            cumulative_histogram(&[], &[1.0]),
            Err(EvalError::EmptyInput)
        ));
        assert!(matches!(
            cumulative_histogram(&[1.0], &[2.0, 1.0]),
            Err(EvalError::UnsortedEdges)
        ));
    }

    #[test]
    fn cumulative_histogram_matches_counting_oracle_and_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let errors: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..2.0)).collect();
        let edges = uniform_edges(2.0, 0.25);
        let h = cumulative_histogram(&errors, &edges).unwrap();
        let mut prev = 0.0;
        for (edge, cdf) in edges.iter().zip(h.cdf.iter()) {
            let count = errors.iter().filter(|e| **e <= *edge).count();
            assert_eq!(*cdf, count as f64 / 500.0);
            assert!(*cdf >= prev);
            assert!((0.0..=1.0).contains(cdf));
            prev = *cdf;
        }
        assert_eq!(*h.cdf.last().unwrap(), 1.0);
    }

    #[test]
    fn plain_histogram_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let samples: Vec<f64> = (0..20_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let bins = plain_histogram(&samples, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(bins.len(), 3);
        assert!((bins[0] - 0.5).abs() < 0.02);
        assert!((bins[1] - 0.5).abs() < 0.02);
        assert_eq!(bins[2], 0.0);
        assert!((bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // a single value lands in exactly one bin
        let one = plain_histogram(&[0.7], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(one, vec![0.0, 1.0, 0.0]);
        // overflow bin
        let over = plain_histogram(&[3.0], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(over, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn format_g6_cases() {
        assert_eq!(format_g6(0.0), "0");
        assert_eq!(format_g6(2.5), "2.5");
        assert_eq!(format_g6(90.0), "90");
        assert_eq!(format_g6(0.232857142857), "0.232857");
        assert_eq!(format_g6(9.534285714), "9.53429");
        assert_eq!(format_g6(1234567.0), "1.23457e6");
        assert_eq!(format_g6(0.00001), "1e-5");
        assert_eq!(format_g6(-0.125), "-0.125");
        assert_eq!(format_g6(999999.4), "999999");
        assert_eq!(format_g6(999999.5), "1e6");
    }

    #[test]
    fn errors_csv_roundtrip() {
        let errors = FrameErrors {
            scene: "fixture".into(),
            frames: vec![
                FrameError { sequence: "seq-01".into(), frame_index: 0, t_err_m: 0.125, q_err_deg: 3.5 },
                FrameError { sequence: "seq-01".into(), frame_index: 1, t_err_m: 0.25, q_err_deg: 7.0 },
            ],
        };
        let mut buf = Vec::new();
        write_errors_csv(&mut buf, &errors).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("errors.csv");
        std::fs::write(&path, &buf).unwrap();
        let back = read_errors_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], errors);
    }
}
