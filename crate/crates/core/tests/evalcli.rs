//! Evaluation-pipeline and command-line integration tests.

use std::path::Path;

use hgpose::cli;
use hgpose::data::{
    generate_fixture_scene, load_image, preprocess, scan_scene, PreprocessConfig, SceneStats,
};
use hgpose::eval::{evaluate, read_errors_csv, summarize, write_errors_csv};
use hgpose::geometry::{angular_error_deg, quat_normalize, translation_error_m, Quaternion, Translation};
use hgpose::model::{HasEntries, Model, ModelConfig, NetworkVariant};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        variant: NetworkVariant::Sum,
        input_hw: (32, 32),
        width_multiplier: 0.125,
        dropout_prob: 0.0,
        ..ModelConfig::default()
    }
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["hgpose"];
    argv.extend_from_slice(args);
    cli::run(argv)
}

#[test]
fn rigged_perfect_model_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("fixture");
    // one test frame (sequence 2), so constant head biases can be exact
    generate_fixture_scene(&scene_dir, 2, 1, (32, 32), 41).unwrap();
    let split = scan_scene(dir.path(), "fixture").unwrap();
    assert_eq!(split.test.len(), 1);
    let target = split.test[0].pose;

    let mut model = Model::<f32>::new(tiny_config()).unwrap();
    model.init_zero();
    model.visit_entries_mut(&mut |e| {
        if e.name == "regressor.head_q.bias" {
            let q = target.q.as_array();
            for (dst, src) in e.data.iter_mut().zip(q) {
                *dst = src as f32;
            }
        } else if e.name == "regressor.head_t.bias" {
            let t = target.t.as_array();
            for (dst, src) in e.data.iter_mut().zip(t) {
                *dst = src as f32;
            }
        }
    });

    let stats = SceneStats::identity();
    let pre = PreprocessConfig::test(32, 32).unwrap();
    let errors = evaluate(&model, &split.test, &stats, &pre, 8).unwrap();
    assert_eq!(errors.frames.len(), 1);
    // bias quantization to f32 costs a few 1e-7
    assert!(errors.frames[0].t_err_m < 1e-5);
    assert!(errors.frames[0].q_err_deg < 1e-3);

    let summary = summarize(std::slice::from_ref(&errors)).unwrap();
    assert!(summary.average_t_m < 1e-5);
}

#[test]
fn evaluate_is_deterministic_and_matches_pipeline_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("fixture");
    generate_fixture_scene(&scene_dir, 2, 5, (40, 48), 43).unwrap();
    let split = scan_scene(dir.path(), "fixture").unwrap();
    let stats = hgpose::data::compute_scene_stats(&split.train, 36).unwrap();
    let pre = PreprocessConfig::test(36, 32).unwrap();

    let mut model = Model::<f32>::new(tiny_config()).unwrap();
    model.init_parameters(None, 47).unwrap();

    let a = evaluate(&model, &split.test, &stats, &pre, 2).unwrap();
    let b = evaluate(&model, &split.test, &stats, &pre, 2).unwrap();
    assert_eq!(a, b);
    // batch size must not affect results (frames are independent)
    let c = evaluate(&model, &split.test, &stats, &pre, 5).unwrap();
    assert_eq!(a, c);

    // independent decomposition: preprocess + forward + geometry ops
    for (record, frame) in split.test.iter().zip(&a.frames) {
        let image = load_image(&record.image_path).unwrap();
        let x = preprocess::<f32>(&image, &stats, &pre, None).unwrap();
        let out = model.forward_eval(&x).unwrap();
        let p = out.prediction(0);
        let q = quat_normalize(&Quaternion::new(p.q_raw[0], p.q_raw[1], p.q_raw[2], p.q_raw[3]))
            .unwrap();
        let expect_q = angular_error_deg(&q, &record.pose.q).unwrap();
        let expect_t =
            translation_error_m(&Translation::new(p.t[0], p.t[1], p.t[2]), &record.pose.t);
        assert!((frame.q_err_deg - expect_q).abs() < 1e-6);
        assert!((frame.t_err_m - expect_t).abs() < 1e-6);
    }
}

#[test]
fn evaluate_rejects_empty_test_split() {
    let model = {
        let mut m = Model::<f32>::new(tiny_config()).unwrap();
        m.init_zero();
        m
    };
    let err = evaluate(
        &model,
        &[],
        &SceneStats::identity(),
        &PreprocessConfig::test(32, 32).unwrap(),
        4,
    )
    .unwrap_err();
    assert!(matches!(err, hgpose::eval::EvalError::EmptyInput));
}

#[test]
fn errors_csv_writer_reads_back_grouped() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("fixture");
    generate_fixture_scene(&scene_dir, 2, 3, (32, 32), 45).unwrap();
    let split = scan_scene(dir.path(), "fixture").unwrap();
    let mut model = Model::<f32>::new(tiny_config()).unwrap();
    model.init_parameters(None, 3).unwrap();
    let stats = SceneStats::identity();
    let pre = PreprocessConfig::test(32, 32).unwrap();
    let errors = evaluate(&model, &split.test, &stats, &pre, 4).unwrap();

    let path = dir.path().join("errors.csv");
    let mut buf = Vec::new();
    write_errors_csv(&mut buf, &errors).unwrap();
    std::fs::write(&path, &buf).unwrap();
    let grouped = read_errors_csv(&path).unwrap();
    assert_eq!(grouped.len(), 1);
    assert_eq!(grouped[0].frames.len(), errors.frames.len());
}

// ---------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------

fn write_short_train_config(path: &Path) {
    let config = serde_json::json!({
        "train": {
            "lr_stages": [[1e-3, 2]],
            "batch_size": 8,
            "loss_beta": 1.0,
            "dropout_prob": 0.0,
            "seed": 9,
            "checkpoint_every": 2,
        }
    });
    std::fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

#[test]
fn cli_full_pipeline_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("officelet");
    let run = dir.path().join("run");
    let cfg_path = dir.path().join("short.json");
    write_short_train_config(&cfg_path);

    assert_eq!(
        run_cli(&[
            "fixture",
            "--out",
            scene.to_str().unwrap(),
            "--sequences",
            "2",
            "--frames-per-seq",
            "6",
            "--height",
            "32",
            "--width",
            "32",
            "--seed",
            "7"
        ]),
        0
    );
    assert_eq!(
        run_cli(&[
            "stats",
            "--scene-dir",
            scene.to_str().unwrap(),
            "--rescale-short-side",
            "32"
        ]),
        0
    );
    assert!(dir.path().join("officelet.stats.json").is_file());

    assert_eq!(
        run_cli(&[
            "train",
            "--scene-dir",
            scene.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--variant",
            "sum",
            "--config",
            cfg_path.to_str().unwrap(),
            "--width-multiplier",
            "0.125",
            "--input-size",
            "32",
            "--rescale-short-side",
            "32",
        ]),
        0
    );
    let ckpt = run.join("ckpt-2.hgp");
    assert!(ckpt.is_file());

    let errors_csv = dir.path().join("errors.csv");
    let summary_csv = dir.path().join("summary.csv");
    for _ in 0..2 {
        assert_eq!(
            run_cli(&[
                "eval",
                "--scene-dir",
                scene.to_str().unwrap(),
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out-errors",
                errors_csv.to_str().unwrap(),
                "--out-summary",
                summary_csv.to_str().unwrap(),
                "--rescale-short-side",
                "32",
            ]),
            0
        );
    }
    let errors_bytes_a = std::fs::read(&errors_csv).unwrap();
    assert_eq!(
        run_cli(&[
            "eval",
            "--scene-dir",
            scene.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out-errors",
            errors_csv.to_str().unwrap(),
            "--rescale-short-side",
            "32",
        ]),
        0
    );
    assert_eq!(errors_bytes_a, std::fs::read(&errors_csv).unwrap());

    let report_dir = dir.path().join("report");
    assert_eq!(
        run_cli(&[
            "report",
            "--errors",
            errors_csv.to_str().unwrap(),
            "--out-dir",
            report_dir.to_str().unwrap(),
        ]),
        0
    );
    for name in ["summary.csv", "hist_t.csv", "hist_q.csv", "cumhist_t.csv", "cumhist_q.csv"] {
        assert!(report_dir.join(name).is_file(), "{name} missing");
    }

    // the report's average row equals the summary recomputed in-process
    let groups = read_errors_csv(&errors_csv).unwrap();
    let expected = summarize(&groups).unwrap();
    let report_summary = std::fs::read_to_string(report_dir.join("summary.csv")).unwrap();
    let avg_line = report_summary
        .lines()
        .find(|l| l.starts_with("AVERAGE"))
        .unwrap();
    let fields: Vec<&str> = avg_line.split(',').collect();
    let avg_t: f64 = fields[2].parse().unwrap();
    let avg_q: f64 = fields[3].parse().unwrap();
    // the CSV carries 6 significant digits
    assert!((avg_t - expected.average_t_m).abs() <= 1e-5 * expected.average_t_m.abs().max(1.0));
    assert!((avg_q - expected.average_q_deg).abs() <= 1e-5 * expected.average_q_deg.abs().max(1.0));
}

#[test]
fn cli_exit_codes() {
    // missing scene directory is a data error
    assert_eq!(
        run_cli(&["stats", "--scene-dir", "/nonexistent/scene"]),
        2
    );
    // unknown flag is a usage error
    assert_eq!(run_cli(&["stats", "--scene-dirs", "x"]), 1);
    // unknown subcommand is a usage error
    assert_eq!(run_cli(&["frobnicate"]), 1);
    // missing checkpoint file is a data error
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s");
    generate_fixture_scene(&scene, 2, 2, (32, 32), 3).unwrap();
    assert_eq!(
        run_cli(&[
            "eval",
            "--scene-dir",
            scene.to_str().unwrap(),
            "--checkpoint",
            dir.path().join("missing.hgp").to_str().unwrap(),
            "--out-errors",
            dir.path().join("e.csv").to_str().unwrap(),
        ]),
        2
    );
    // help is a success
    assert_eq!(run_cli(&["--help"]), 0);
}

#[test]
fn cli_beta_search_runs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let out = dir.path().join("bs");
    let cfg_path = dir.path().join("short.json");
    write_short_train_config(&cfg_path);
    generate_fixture_scene(&scene, 2, 8, (32, 32), 11).unwrap();
    assert_eq!(
        run_cli(&[
            "beta-search",
            "--scene-dir",
            scene.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--width-multiplier",
            "0.125",
            "--input-size",
            "32",
            "--rescale-short-side",
            "32",
            "--betas",
            "1,5",
            "--budget-epochs",
            "1",
        ]),
        0
    );
    let csv = std::fs::read_to_string(out.join("beta_search.csv")).unwrap();
    assert!(csv.starts_with("beta,median_t_m,median_q_deg,score"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn cli_selftest_fast() {
    assert_eq!(run_cli(&["selftest", "--fast"]), 0);
}
