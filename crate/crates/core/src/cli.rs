//! The `hgpose` command-line surface.
//!
//! Subcommands: `fixture` (generate a synthetic scene), `stats`
//! (compute/cache scene statistics), `train`, `beta-search`, `eval`,
//! `report` and `selftest`. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 numerical abort.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    compute_scene_stats, generate_fixture_scene, load_scene_stats, save_scene_stats, scan_scene,
    DataError, PreprocessConfig, SceneSplit, SceneStats, SceneStatsFile,
};
use crate::eval::{
    cumulative_histogram, evaluate, plain_histogram, read_errors_csv, summarize, uniform_edges,
    write_errors_csv, write_histogram_csv, write_summary_csv, EvalError,
};
use crate::loss::LossError;
use crate::model::{
    load_checkpoint, model_from_checkpoint, Model, ModelConfig, ModelError, NetworkVariant,
};
use crate::training::{beta_grid_search, fit, TrainConfig, TrainingError};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidPreprocess { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::InvalidBeta { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnsortedEdges => CliError::Usage(e.to_string()),
            EvalError::Frame { numeric: true, .. } => CliError::Numeric(e.to_string()),
            EvalError::Model(ref inner) if matches!(inner, ModelError::InvalidConfig { .. }) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainingError::OutOfRange { .. } | TrainingError::NoCandidates => {
                CliError::Usage(e.to_string())
            }
            TrainingError::Model(inner) => inner.into(),
            TrainingError::Data(inner) => inner.into(),
            TrainingError::Loss(inner) => inner.into(),
            TrainingError::Eval(inner) => inner.into(),
            TrainingError::Io(inner) => CliError::Data(inner.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "hgpose",
    about = "Hourglass-network camera pose regression: train, evaluate, report",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene in the 7-Scenes directory layout.
    Fixture(FixtureArgs),
    /// Compute per-scene intensity statistics and cache them as JSON.
    Stats(StatsArgs),
    /// Train a model on one scene.
    Train(Box<TrainArgs>),
    /// Grid-search the loss scale factor beta on a held-out train tail.
    BetaSearch(Box<BetaSearchArgs>),
    /// Evaluate a checkpoint on a scene's test split.
    Eval(EvalArgs),
    /// Merge per-scene error CSVs into a summary table and histograms.
    Report(ReportArgs),
    /// Run the built-in property suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct FixtureArgs {
    /// Scene directory to create (its parent is the dataset root).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    sequences: usize,
    #[arg(long, default_value_t = 8)]
    frames_per_seq: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    /// Path to the scene directory (root/<scene>).
    #[arg(long)]
    scene_dir: PathBuf,
    #[arg(long, default_value_t = 256)]
    rescale_short_side: usize,
    /// Output JSON path; defaults to `<root>/<scene>.stats.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene_dir: PathBuf,
    /// Run directory for config.json, log.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Skip aggregation variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<NetworkVariant>,
    /// Loss scale factor.
    #[arg(long)]
    beta: Option<f64>,
    /// JSON file with {"model": {..}, "train": {..}, "preprocess": {..}}
    /// sections, all optional; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder weights to import before training (checkpoint container
    /// holding `encoder.*` tensors).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Resume from a `ckpt-<n>.hgp` written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    width_multiplier: Option<f64>,
    /// Square network input size in pixels (multiple of 32).
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    rescale_short_side: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Cached statistics JSON to use instead of computing them.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct BetaSearchArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated candidate betas.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    betas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    budget_epochs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene_dir: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-frame errors CSV path.
    #[arg(long)]
    out_errors: PathBuf,
    /// Per-scene summary CSV path.
    #[arg(long)]
    out_summary: Option<PathBuf>,
    #[arg(long)]
    rescale_short_side: Option<usize>,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more error CSVs produced by `eval`.
    #[arg(long, required = true, num_args = 1..)]
    errors: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Translation histogram range (meters) and step.
    #[arg(long, default_value_t = 1.0)]
    t_max: f64,
    #[arg(long, default_value_t = 0.05)]
    t_step: f64,
    /// Orientation histogram range (degrees) and step.
    #[arg(long, default_value_t = 40.0)]
    q_max: f64,
    #[arg(long, default_value_t = 2.0)]
    q_step: f64,
}

#[derive(Args)]
struct SelftestArgs {
    /// Skip the slow gradient sweep.
    #[arg(long)]
    fast: bool,
}

fn parse_variant(s: &str) -> Result<NetworkVariant, String> {
    match s {
        "concat" => Ok(NetworkVariant::Concat),
        "sum" => Ok(NetworkVariant::Sum),
        other => Err(format!("unknown variant '{other}' (expected 'concat' or 'sum')")),
    }
}

/// Runs the CLI; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                0
            } else {
                1
            };
        }
    };
    let result = match cli.command {
        Command::Fixture(args) => cmd_fixture(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Train(args) => cmd_train(*args),
        Command::BetaSearch(args) => cmd_beta_search(*args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Selftest(args) => cmd_selftest(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn split_scene_dir(path: &Path) -> Result<(PathBuf, String), CliError> {
    let scene = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("scene dir {path:?} has no name component")))?
        .to_string_lossy()
        .into_owned();
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok((root, scene))
}

/// Stats precedence: explicit file, then the cache beside the scene,
/// otherwise compute from the train split (and write the cache).
fn resolve_stats(
    root: &Path,
    scene: &str,
    split: &SceneSplit,
    rescale_short_side: usize,
    stats_path: Option<&Path>,
) -> Result<SceneStats, CliError> {
    if let Some(path) = stats_path {
        let text = fs::read_to_string(path)?;
        let file: SceneStatsFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("stats file {path:?}: {e}")))?;
        return Ok(SceneStats { mean: file.mean, std: file.std });
    }
    if let Ok(stats) = load_scene_stats(root, scene) {
        return Ok(stats);
    }
    let stats = compute_scene_stats(&split.train, rescale_short_side)?;
    save_scene_stats(root, scene, &stats)?;
    Ok(stats)
}

fn cmd_fixture(args: FixtureArgs) -> Result<(), CliError> {
    generate_fixture_scene(
        &args.out,
        args.sequences,
        args.frames_per_seq,
        (args.height, args.width),
        args.seed,
    )?;
    let (root, scene) = split_scene_dir(&args.out)?;
    let split = scan_scene(&root, &scene)?;
    println!(
        "fixture scene '{scene}' written: {} train / {} test frames",
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let (root, scene) = split_scene_dir(&args.scene_dir)?;
    let split = scan_scene(&root, &scene)?;
    let stats = compute_scene_stats(&split.train, args.rescale_short_side)?;
    match &args.out {
        Some(path) => {
            let file = SceneStatsFile { scene: scene.clone(), mean: stats.mean, std: stats.std };
            fs::write(
                path,
                serde_json::to_string_pretty(&file).expect("stats serialize") + "\n",
            )?;
        }
        None => save_scene_stats(&root, &scene, &stats)?,
    }
    println!(
        "{scene}: mean [{:.6}, {:.6}, {:.6}] std [{:.6}, {:.6}, {:.6}] over {} train frames",
        stats.mean[0], stats.mean[1], stats.mean[2],
        stats.std[0], stats.std[1], stats.std[2],
        split.train.len()
    );
    Ok(())
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    preprocess: Option<PreprocessConfig>,
}

struct ResolvedTrainSetup {
    model_config: ModelConfig,
    train_config: TrainConfig,
    preprocess: PreprocessConfig,
}

fn resolve_train_setup(args: &TrainArgs) -> Result<ResolvedTrainSetup, CliError> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config file {path:?}: {e}")))?
        }
        None => FileConfig::default(),
    };
    let mut model_config = file.model.unwrap_or_default();
    let mut train_config = file.train.unwrap_or_default();
    let mut preprocess = file.preprocess.unwrap_or_default();

    if let Some(v) = args.variant {
        model_config.variant = v;
    }
    if let Some(b) = args.beta {
        train_config.loss_beta = b;
    }
    if let Some(s) = args.seed {
        train_config.seed = s;
    }
    if let Some(w) = args.width_multiplier {
        model_config.width_multiplier = w;
    }
    if let Some(n) = args.input_size {
        model_config.input_hw = (n, n);
    }
    if let Some(r) = args.rescale_short_side {
        preprocess.rescale_short_side = r;
    }
    if let Some(b) = args.batch_size {
        train_config.batch_size = b;
    }
    if let Some(d) = args.dropout {
        train_config.dropout_prob = d;
        model_config.dropout_prob = d;
    } else {
        model_config.dropout_prob = train_config.dropout_prob;
    }
    if let Some(c) = args.checkpoint_every {
        train_config.checkpoint_every = c;
    }

    let (h, w) = model_config.input_hw;
    if h != w {
        return Err(CliError::Usage(format!(
            "square crops require a square input, got {h}x{w}"
        )));
    }
    preprocess.crop = h;
    if preprocess.rescale_short_side < preprocess.crop {
        return Err(CliError::Usage(format!(
            "rescale_short_side {} smaller than crop {}",
            preprocess.rescale_short_side, preprocess.crop
        )));
    }
    model_config.validate()?;
    Ok(ResolvedTrainSetup { model_config, train_config, preprocess })
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let setup = resolve_train_setup(&args)?;
    let (root, scene) = split_scene_dir(&args.scene_dir)?;
    let split = scan_scene(&root, &scene)?;
    let stats = resolve_stats(
        &root,
        &scene,
        &split,
        setup.preprocess.rescale_short_side,
        args.stats.as_deref(),
    )?;

    let mut model = Model::<f32>::new(setup.model_config.clone())?;
    if args.resume.is_none() {
        let pretrained = match &args.pretrained {
            Some(path) => Some(load_checkpoint(path)?.1),
            None => None,
        };
        model.init_parameters(pretrained.as_ref(), setup.train_config.seed)?;
    }

    let report = fit(
        &mut model,
        &split.train,
        &stats,
        &setup.preprocess,
        &setup.train_config,
        Some(&args.out),
        args.resume.as_deref(),
    )?;
    println!(
        "trained '{scene}' ({} variant) for {} epochs, {} steps; final loss {:.6} (t {:.6}, q {:.6})",
        setup.model_config.variant,
        report.epochs_run,
        report.steps,
        report.final_epoch_loss.total,
        report.final_epoch_loss.translation_term,
        report.final_epoch_loss.orientation_term,
    );
    if let Some(last) = report.checkpoints.last() {
        println!("final checkpoint: {}", last.display());
    }
    Ok(())
}

fn cmd_beta_search(args: BetaSearchArgs) -> Result<(), CliError> {
    let setup = resolve_train_setup(&args.train)?;
    let (root, scene) = split_scene_dir(&args.train.scene_dir)?;
    let split = scan_scene(&root, &scene)?;
    let stats = resolve_stats(
        &root,
        &scene,
        &split,
        setup.preprocess.rescale_short_side,
        args.train.stats.as_deref(),
    )?;

    let report = beta_grid_search::<f32>(
        &setup.model_config,
        &split,
        &stats,
        &setup.preprocess,
        &setup.train_config,
        &args.betas,
        args.budget_epochs,
    )?;
    println!("beta,median_t_m,median_q_deg,score");
    for c in &report.candidates {
        println!(
            "{},{},{},{}",
            c.beta,
            crate::eval::format_g6(c.median_t_m),
            crate::eval::format_g6(c.median_q_deg),
            crate::eval::format_g6(c.score)
        );
    }
    println!("best beta: {}", report.best_beta);
    fs::create_dir_all(&args.train.out)?;
    let mut csv = String::from("beta,median_t_m,median_q_deg,score\n");
    for c in &report.candidates {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            c.beta,
            crate::eval::format_g6(c.median_t_m),
            crate::eval::format_g6(c.median_q_deg),
            crate::eval::format_g6(c.score)
        ));
    }
    fs::write(args.train.out.join("beta_search.csv"), csv)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (root, scene) = split_scene_dir(&args.scene_dir)?;
    let split = scan_scene(&root, &scene)?;
    let model = model_from_checkpoint::<f32>(&args.checkpoint)?;
    let (h, w) = model.config.input_hw;
    if h != w {
        return Err(CliError::Usage(format!(
            "checkpoint has a non-square input {h}x{w}"
        )));
    }
    let rescale = args.rescale_short_side.unwrap_or_else(|| {
        // the reference pairing is crop 224 from a 256 short side
        ((h as f64) * 256.0 / 224.0).round() as usize
    });
    let preprocess = PreprocessConfig::test(rescale.max(h), h)?;
    let stats = resolve_stats(&root, &scene, &split, preprocess.rescale_short_side, args.stats.as_deref())?;

    let errors = evaluate(&model, &split.test, &stats, &preprocess, args.batch_size)?;
    let mut buf = Vec::new();
    write_errors_csv(&mut buf, &errors)?;
    fs::write(&args.out_errors, &buf)?;

    let summary = summarize(std::slice::from_ref(&errors))?;
    if let Some(path) = &args.out_summary {
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &summary)?;
        fs::write(path, &buf)?;
    }
    println!(
        "{scene}: {} frames, median {} m / {} deg",
        errors.frames.len(),
        crate::eval::format_g6(summary.scenes[0].median_t_m),
        crate::eval::format_g6(summary.scenes[0].median_q_deg)
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let mut groups = Vec::new();
    for path in &args.errors {
        groups.extend(read_errors_csv(path)?);
    }
    let summary = summarize(&groups)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &summary)?;
    fs::write(args.out_dir.join("summary.csv"), &buf)?;

    let all_t: Vec<f64> = groups.iter().flat_map(|g| g.t_errors()).collect();
    let all_q: Vec<f64> = groups.iter().flat_map(|g| g.q_errors()).collect();
    let t_edges = uniform_edges(args.t_max, args.t_step);
    let q_edges = uniform_edges(args.q_max, args.q_step);
    for (name, edges, values) in [
        ("hist_t.csv", &t_edges, plain_histogram(&all_t, &t_edges)?),
        ("hist_q.csv", &q_edges, plain_histogram(&all_q, &q_edges)?),
        (
            "cumhist_t.csv",
            &t_edges,
            cumulative_histogram(&all_t, &t_edges)?.cdf,
        ),
        (
            "cumhist_q.csv",
            &q_edges,
            cumulative_histogram(&all_q, &q_edges)?.cdf,
        ),
    ] {
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, edges, &values)?;
        fs::write(args.out_dir.join(name), &buf)?;
    }
    println!(
        "report over {} scenes: average {} m / {} deg",
        summary.scenes.len(),
        crate::eval::format_g6(summary.average_t_m),
        crate::eval::format_g6(summary.average_q_deg)
    );
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> Result<(), CliError> {
    selftest::run_all(args.fast).map_err(CliError::Numeric)
}

/// Built-in property suites, callable without the test harness.
mod selftest {
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::geometry::{
        angular_error_deg, quat_normalize, quat_to_rotmat, rotmat_to_quat, Quaternion,
    };
    use crate::loss::{pose_loss, LossParams};
    use crate::model::{HasEntries, Model, ModelConfig, NetworkVariant, PosePrediction};

    fn check(name: &str, ok: bool, failures: &mut Vec<String>) {
        println!("selftest {name}: {}", if ok { "ok" } else { "FAILED" });
        if !ok {
            failures.push(name.to_string());
        }
    }

    pub fn run_all(fast: bool) -> Result<(), String> {
        let mut failures = Vec::new();

        check("quaternion roundtrip", quat_roundtrip(), &mut failures);
        check("angular error cases", angular_cases(), &mut failures);
        check("loss oracle", loss_oracle(), &mut failures);
        check("shape plan", shape_plan(), &mut failures);
        check("eval determinism", eval_determinism(), &mut failures);
        if !fast {
            check("gradient spot check", gradient_spot_check(), &mut failures);
        }

        if failures.is_empty() {
            println!("selftest: all suites passed");
            Ok(())
        } else {
            Err(format!("selftest failures: {}", failures.join(", ")))
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Quaternion {
        loop {
            let q = Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                return quat_normalize(&q).unwrap().canonicalized();
            }
        }
    }

    fn quat_roundtrip() -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        (0..1000).all(|_| {
            let q = random_unit(&mut rng);
            let back = rotmat_to_quat(&quat_to_rotmat(&q).unwrap()).unwrap();
            q.as_array()
                .iter()
                .zip(back.as_array())
                .all(|(a, b)| (a - b).abs() < 1e-6)
        })
    }

    fn angular_cases() -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let q = random_unit(&mut rng);
        let h = 0.5_f64.sqrt();
        angular_error_deg(&q, &q).unwrap() < 1e-6
            && angular_error_deg(&q, &q.negated()).unwrap() < 1e-6
            && (angular_error_deg(&Quaternion::IDENTITY, &Quaternion::new(h, h, 0.0, 0.0)).unwrap()
                - 90.0)
                .abs()
                < 1e-6
    }

    fn loss_oracle() -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        (0..10_000).all(|_| {
            let target = crate::geometry::Pose::new(
                random_unit(&mut rng),
                crate::geometry::Translation::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
            );
            let pred = PosePrediction {
                q_raw: [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ],
                t: [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ],
            };
            if pred.q_raw.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3 {
                return true;
            }
            let beta = rng.gen_range(1.0..10.0);
            let got = pose_loss(&pred, &target, &LossParams { beta }).unwrap();
            // straight-line transcription
            let t = target.t.as_array();
            let dt = ((t[0] - pred.t[0]).powi(2)
                + (t[1] - pred.t[1]).powi(2)
                + (t[2] - pred.t[2]).powi(2))
            .sqrt();
            let qn = pred.q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let q = target.q.as_array();
            let dq = (0..4)
                .map(|i| (q[i] - pred.q_raw[i] / qn).powi(2))
                .sum::<f64>()
                .sqrt();
            (got.total - (dt + beta * dq)).abs() < 1e-9
        })
    }

    fn shape_plan() -> bool {
        let plan = ModelConfig::default().shape_plan().unwrap();
        plan.stem_conv == (64, 112, 112)
            && plan.stages == [(64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)]
            && plan.decoder == [(256, 14, 14), (128, 28, 28), (64, 56, 56), (32, 56, 56)]
            && plan.hidden == 2048
    }

    fn eval_determinism() -> bool {
        let mut cfg = ModelConfig::tiny(NetworkVariant::Sum);
        cfg.dropout_prob = 0.0;
        let mut model = Model::<f32>::new(cfg).unwrap();
        model.init_parameters(None, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let x = Array4::<f32>::from_shape_simple_fn((2, 3, 32, 32), || rng.gen_range(-1.0..1.0));
        let a = model.forward_eval(&x).unwrap();
        let b = model.forward_eval(&x).unwrap();
        a.q_raw == b.q_raw && a.t == b.t
    }

    /// Small finite-difference sweep (a few parameters per layer kind) on
    /// the tiny f64 model; the full sweep lives in the acceptance suite.
    fn gradient_spot_check() -> bool {
        use crate::loss::{batch_pose_loss, batch_pose_loss_with_grads, LossParams};
        use ndarray::Array2;
        use std::collections::HashMap;

        let mut cfg = ModelConfig::tiny(NetworkVariant::Sum);
        cfg.dropout_prob = 0.0;
        let mut model = Model::<f64>::new(cfg).unwrap();
        model.init_parameters(None, 11).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let x = Array4::<f64>::from_shape_simple_fn((2, 3, 32, 32), || rng.gen_range(-1.0..1.0));
        let targets: Vec<crate::geometry::Pose> = (0..2)
            .map(|_| {
                crate::geometry::Pose::new(
                    random_unit(&mut rng),
                    crate::geometry::Translation::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                )
            })
            .collect();
        let params = LossParams { beta: 2.0 };

        let loss_of = |model: &mut Model<f64>| -> f64 {
            let (pred, _) = model.forward_frozen(&x).unwrap();
            batch_pose_loss(&pred.predictions(), &targets, &params)
                .unwrap()
                .total
        };

        // analytic gradients of the frozen-statistics function (mild
        // curvature suits the 1e-3 finite-difference step)
        let (pred, trace) = model.forward_frozen(&x).unwrap();
        let (_, grads) = batch_pose_loss_with_grads(&pred.predictions(), &targets, &params).unwrap();
        let mut grad_q = Array2::<f64>::zeros((2, 4));
        let mut grad_t = Array2::<f64>::zeros((2, 3));
        for (i, g) in grads.iter().enumerate() {
            for j in 0..4 {
                grad_q[[i, j]] = g.d_q_raw[j];
            }
            for j in 0..3 {
                grad_t[[i, j]] = g.d_t[j];
            }
        }
        model.zero_grads();
        model.backward(&trace, &grad_q, &grad_t);

        let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
        let mut sizes: Vec<(crate::model::EntryKind, String, usize)> = Vec::new();
        model.visit_entries_mut(&mut |e| {
            if let Some(g) = e.grad {
                analytic.insert(e.name.clone(), g.to_vec());
                sizes.push((e.kind, e.name.clone(), e.data.len()));
            }
        });

        // a few samples per parameter kind
        let kinds = [
            crate::model::EntryKind::ConvWeight,
            crate::model::EntryKind::ConvBias,
            crate::model::EntryKind::FcWeight,
            crate::model::EntryKind::FcBias,
            crate::model::EntryKind::BnScale,
            crate::model::EntryKind::BnShift,
        ];
        let step = 1e-3;
        for kind in kinds {
            let pool: Vec<&(crate::model::EntryKind, String, usize)> =
                sizes.iter().filter(|(k, _, _)| *k == kind).collect();
            if pool.is_empty() {
                continue;
            }
            for _ in 0..8 {
                let (_, name, len) = pool[rng.gen_range(0..pool.len())];
                let idx = rng.gen_range(0..*len);
                let nudge = |model: &mut Model<f64>, delta: f64| {
                    model.visit_entries_mut(&mut |e| {
                        if e.name == *name {
                            e.data[idx] += delta;
                        }
                    });
                };
                nudge(&mut model, step);
                let plus = loss_of(&mut model);
                nudge(&mut model, -2.0 * step);
                let minus = loss_of(&mut model);
                nudge(&mut model, step);
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[name][idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                if rel > 1e-4 {
                    eprintln!("gradient mismatch at {name}[{idx}]: analytic {a}, numeric {numeric}");
                    return false;
                }
            }
        }
        true
    }
}
