//! Optimization loop: staged learning rates, Adam with classical
//! (coupled) weight decay on convolution and fully-connected weights
//! only, per-epoch logging, checkpointing and exact resume.
//!
//! Reproducibility contract: all randomness comes from three ChaCha
//! streams derived from `TrainConfig::seed` and the epoch index -
//! shuffling (`seed`, stream = epoch), crop sampling (`seed ^ CROP_SEED_XOR`,
//! stream = epoch) and dropout (`seed ^ DROPOUT_SEED_XOR`, stream = epoch).
//! Because every epoch's streams are re-derived, resuming from an epoch
//! checkpoint replays the uninterrupted run bit for bit.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    epoch_batches, load_image, preprocess, CropMode, DataError, FrameRecord, PreprocessConfig,
    SceneSplit, SceneStats,
};
use crate::eval::{evaluate, median, EvalError};
use crate::geometry::Pose;
use crate::loss::{batch_pose_loss_with_grads, LossError, LossParams, LossValue};
use crate::model::{
    load_store, save_checkpoint, save_store, HasEntries, Model, ModelConfig, ModelError,
    ParameterStore, TensorData,
};
use crate::Elem;

pub const CROP_SEED_XOR: u64 = 0x43524f50; // "CROP"
pub const DROPOUT_SEED_XOR: u64 = 0x44524f50; // "DROP"

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("epoch {epoch} outside the schedule (total {total})")]
    OutOfRange { epoch: usize, total: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error("no candidate betas given")]
    NoCandidates,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. The defaults are the reference recipe:
/// learning rate 1e-3 for 50 epochs, 1e-4 for 40, 1e-5 for 30; Adam with
/// beta1 0.9, beta2 0.99; weight decay 1e-5; batch size 40; dropout 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_stages: Vec<(f64, usize)>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss_beta: f64,
    /// Dropout probability the CLI applies when building the model; the
    /// network itself reads `ModelConfig::dropout_prob`.
    pub dropout_prob: f64,
    pub seed: u64,
    /// Checkpoint cadence in epochs; the final epoch always checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_stages: vec![(1e-3, 50), (1e-4, 40), (1e-5, 30)],
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_epsilon: 1e-8,
            weight_decay: 1e-5,
            batch_size: 40,
            loss_beta: 3.0,
            dropout_prob: 0.5,
            seed: 0,
            checkpoint_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.lr_stages.iter().map(|(_, n)| n).sum()
    }
}

/// Piecewise-constant learning rate of the staged schedule.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64, TrainingError> {
    let mut remaining = epoch;
    for &(lr, n) in &config.lr_stages {
        if remaining < n {
            return Ok(lr);
        }
        remaining -= n;
    }
    Err(TrainingError::OutOfRange { epoch, total: config.total_epochs() })
}

/// One bias-corrected Adam update on a flat parameter slice. When
/// `weight_decay > 0` the decay term `wd * param` is added to the raw
/// gradient before the moment updates (classical coupled form).
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Elem>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    assert!(step >= 1, "Adam step counter starts at 1");
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), m.len());
    assert_eq!(param.len(), v.len());
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    let wd = T::from_f64(weight_decay);
    let inv_bc1 = T::from_f64(1.0 / (1.0 - beta1.powi(step as i32)));
    let inv_bc2 = T::from_f64(1.0 / (1.0 - beta2.powi(step as i32)));
    for i in 0..param.len() {
        let g = grad[i] + wd * param[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] * inv_bc1;
        let v_hat = v[i] * inv_bc2;
        param[i] = param[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
    }
}

/// Adam state for a whole model, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Elem> Adam<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            weight_decay: config.weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one optimizer step to every trainable parameter, consuming
    /// the gradients accumulated on the model.
    pub fn step(&mut self, model: &mut Model<T>, lr: f64) {
        self.step += 1;
        let step = self.step;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let wd = self.weight_decay;
        let moments = &mut self.moments;
        model.visit_entries_mut(&mut |e| {
            let Some(grad) = e.grad else { return };
            let (m, v) = moments
                .entry(e.name.clone())
                .or_insert_with(|| (vec![T::zero(); e.data.len()], vec![T::zero(); e.data.len()]));
            let decay = if e.kind.weight_decayed() { wd } else { 0.0 };
            adam_update(e.data, grad, m, v, step, lr, b1, b2, eps, decay);
        });
    }

    /// Serializes the moment estimates in the model's canonical entry
    /// order, as `adam.m.<name>` / `adam.v.<name>` tensors.
    fn to_store(&self, model: &Model<T>) -> ParameterStore {
        let mut store = ParameterStore::new();
        model.visit_entries(&mut |e| {
            if !e.kind.is_parameter() {
                return;
            }
            let (m, v) = match self.moments.get(&e.name) {
                Some(pair) => (pair.0.clone(), pair.1.clone()),
                None => (vec![T::zero(); e.data.len()], vec![T::zero(); e.data.len()]),
            };
            for (prefix, data) in [("adam.m", m), ("adam.v", v)] {
                store
                    .insert(
                        format!("{prefix}.{}", e.name),
                        TensorData {
                            shape: e.shape.clone(),
                            data: data.iter().map(|x| x.into_f64() as f32).collect(),
                        },
                    )
                    .expect("unique moment names");
            }
        });
        store
    }

    fn load_from_store(&mut self, model: &Model<T>, store: &ParameterStore) -> Result<(), ModelError> {
        self.moments.clear();
        let mut error = None;
        model.visit_entries(&mut |e| {
            if !e.kind.is_parameter() || error.is_some() {
                return;
            }
            let m = store.get(&format!("adam.m.{}", e.name));
            let v = store.get(&format!("adam.v.{}", e.name));
            match (m, v) {
                (Some(m), Some(v)) if m.shape == e.shape && v.shape == e.shape => {
                    self.moments.insert(
                        e.name.clone(),
                        (
                            m.data.iter().map(|x| T::from_f64(*x as f64)).collect(),
                            v.data.iter().map(|x| T::from_f64(*x as f64)).collect(),
                        ),
                    );
                }
                _ => {
                    error = Some(ModelError::CorruptCheckpoint {
                        reason: format!("optimizer moments for '{}' missing or misshaped", e.name),
                    });
                }
            }
        });
        match error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Progress counters stored in the optimizer sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub completed_epochs: usize,
    pub steps: u64,
}

/// Summary of a finished (or resumed) fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_epoch_loss: LossValue,
    pub checkpoints: Vec<PathBuf>,
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let s = ckpt.to_string_lossy();
    match s.strip_suffix(".hgp") {
        Some(stem) => PathBuf::from(format!("{stem}.opt.hgp")),
        None => ckpt.with_extension("opt.hgp"),
    }
}

fn crop_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CROP_SEED_XOR);
    rng.set_stream(epoch as u64);
    rng
}

fn dropout_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SEED_XOR);
    rng.set_stream(epoch as u64);
    rng
}

fn batch_input<T: Elem>(
    records: &[FrameRecord],
    stats: &SceneStats,
    cfg: &PreprocessConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<T>, Vec<Pose>), TrainingError> {
    let mut images = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for record in records {
        let image = load_image(&record.image_path)?;
        images.push(preprocess::<T>(&image, stats, cfg, Some(rng))?);
        targets.push(record.pose);
    }
    Ok((crate::data::stack_batch(&images), targets))
}

fn write_run_checkpoint<T: Elem>(
    model: &Model<T>,
    adam: &Adam<T>,
    run_dir: &Path,
    state: TrainState,
) -> Result<PathBuf, TrainingError> {
    let ckpt = run_dir.join(format!("ckpt-{}.hgp", state.completed_epochs));
    save_checkpoint(model, &ckpt)?;
    let sidecar = sidecar_path(&ckpt);
    save_store(
        &sidecar,
        &model.config,
        &adam.to_store(model),
        Some(serde_json::to_value(state).expect("state serializes")),
    )?;
    Ok(ckpt)
}

/// Loads model weights and optimizer state from `ckpt-<n>.hgp` plus its
/// `.opt.hgp` sidecar; returns the training progress recorded there.
pub fn load_resume_point<T: Elem>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    ckpt: &Path,
) -> Result<TrainState, TrainingError> {
    let (_, store) = crate::model::load_checkpoint(ckpt)?;
    model.load_state_dict(&store)?;
    let (_, moments, meta) = load_store(&sidecar_path(ckpt))?;
    adam.load_from_store(model, &moments)?;
    let meta = meta.ok_or_else(|| ModelError::CorruptCheckpoint {
        reason: "optimizer sidecar lacks train_state".to_string(),
    })?;
    let state: TrainState =
        serde_json::from_value(meta).map_err(|e| ModelError::CorruptCheckpoint {
            reason: format!("train_state: {e}"),
        })?;
    adam.step = state.steps;
    Ok(state)
}

/// Runs the staged schedule over the training records. With a run
/// directory the fit writes `config.json`, a per-epoch `log.csv`
/// (`epoch,step,lr,loss_total,loss_t,loss_q`) and `ckpt-<epoch>.hgp`
/// checkpoints with optimizer sidecars. `resume_from` continues an
/// interrupted run from one of those checkpoints, bit-exactly.
pub fn fit<T: Elem>(
    model: &mut Model<T>,
    train_records: &[FrameRecord],
    stats: &SceneStats,
    preprocess_cfg: &PreprocessConfig,
    config: &TrainConfig,
    run_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<FitReport, TrainingError> {
    if train_records.is_empty() {
        return Err(TrainingError::Data(DataError::EmptySet));
    }
    if !model.is_initialized() && resume_from.is_none() {
        return Err(TrainingError::Model(ModelError::UninitializedModel));
    }
    let pre_cfg = preprocess_cfg.with_mode(CropMode::TrainRandomCrop);
    let params = LossParams::new(config.loss_beta)?;
    let total = config.total_epochs();

    let mut adam = Adam::new(config);
    let mut start_epoch = 0usize;
    if let Some(ckpt) = resume_from {
        let state = load_resume_point(model, &mut adam, ckpt)?;
        start_epoch = state.completed_epochs;
    }

    let mut log: Option<fs::File> = None;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        let run_config = serde_json::json!({
            "model": model.config,
            "train": config,
            "preprocess": pre_cfg,
        });
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&run_config).expect("config serializes") + "\n",
        )?;
        let log_path = dir.join("log.csv");
        let fresh = start_epoch == 0 || !log_path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        if fresh && file.metadata()?.len() == 0 {
            writeln!(file, "epoch,step,lr,loss_total,loss_t,loss_q")?;
        }
        log = Some(file);
    }

    let mut steps = adam.step;
    let mut checkpoints = Vec::new();
    let mut final_epoch_loss = LossValue {
        total: f64::NAN,
        translation_term: f64::NAN,
        orientation_term: f64::NAN,
        beta_used: params.beta,
    };

    for epoch in start_epoch..total {
        let lr = lr_at(config, epoch)?;
        let mut crop = crop_rng(config.seed, epoch);
        let mut dropout = dropout_rng(config.seed, epoch);
        let batches = epoch_batches(train_records, config.batch_size, config.seed, epoch);

        let mut sum_total = 0.0;
        let mut sum_t = 0.0;
        let mut sum_q = 0.0;
        for batch in &batches {
            let (images, targets) = batch_input::<T>(batch, stats, &pre_cfg, &mut crop)?;
            let (pred, trace) = model.forward_train(&images, &mut dropout)?;
            let (value, grads) =
                batch_pose_loss_with_grads(&pred.predictions(), &targets, &params)?;
            if !value.total.is_finite() {
                return Err(TrainingError::NonFiniteLoss { epoch, step: steps + 1 });
            }
            let n = batch.len();
            let mut grad_q = Array2::<T>::zeros((n, 4));
            let mut grad_t = Array2::<T>::zeros((n, 3));
            for (i, g) in grads.iter().enumerate() {
                for j in 0..4 {
                    grad_q[[i, j]] = T::from_f64(g.d_q_raw[j]);
                }
                for j in 0..3 {
                    grad_t[[i, j]] = T::from_f64(g.d_t[j]);
                }
            }
            model.zero_grads();
            model.backward(&trace, &grad_q, &grad_t);
            adam.step(model, lr);
            steps += 1;
            sum_total += value.total * n as f64;
            sum_t += value.translation_term * n as f64;
            sum_q += value.orientation_term * n as f64;
        }

        let n_frames = train_records.len() as f64;
        final_epoch_loss = LossValue {
            total: sum_total / n_frames,
            translation_term: sum_t / n_frames,
            orientation_term: sum_q / n_frames,
            beta_used: params.beta,
        };
        if let Some(file) = &mut log {
            use crate::eval::format_g6 as g6;
            writeln!(
                file,
                "{},{},{},{},{},{}",
                epoch,
                steps,
                g6(lr),
                g6(final_epoch_loss.total),
                g6(final_epoch_loss.translation_term),
                g6(final_epoch_loss.orientation_term)
            )?;
        }

        let completed = epoch + 1;
        let due = config.checkpoint_every > 0 && completed % config.checkpoint_every == 0;
        if let Some(dir) = run_dir {
            if due || completed == total {
                let state = TrainState { completed_epochs: completed, steps };
                checkpoints.push(write_run_checkpoint(model, &adam, dir, state)?);
            }
        }
    }

    Ok(FitReport {
        epochs_run: total - start_epoch,
        steps,
        final_epoch_loss,
        checkpoints,
    })
}

/// Per-candidate result of the beta grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaCandidateReport {
    pub beta: f64,
    pub median_t_m: f64,
    pub median_q_deg: f64,
    /// Selection score: median translation error (m) plus median
    /// orientation error (radians).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaSearchReport {
    pub best_beta: f64,
    pub candidates: Vec<BetaCandidateReport>,
}

/// Schedule truncated (or tail-extended) to exactly `budget` epochs.
fn budget_stages(stages: &[(f64, usize)], budget: usize) -> Vec<(f64, usize)> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    let mut left = budget;
    for &(lr, n) in stages {
        if left == 0 {
            break;
        }
        let take = n.min(left);
        out.push((lr, take));
        left -= take;
    }
    if left > 0 {
        match out.last_mut() {
            Some(last) => last.1 += left,
            None => out.push((stages.last().map_or(1e-3, |s| s.0), left)),
        }
    }
    out
}

/// Trains one short model per candidate beta on the leading 90% of the
/// train split and scores each on the held-out tail (last 10% by frame
/// order): median translation error in meters plus median orientation
/// error in radians. Ties go to the smaller beta.
pub fn beta_grid_search<T: Elem>(
    model_config: &ModelConfig,
    split: &SceneSplit,
    stats: &SceneStats,
    preprocess_cfg: &PreprocessConfig,
    base: &TrainConfig,
    candidate_betas: &[f64],
    budget_epochs: usize,
) -> Result<BetaSearchReport, TrainingError> {
    if candidate_betas.is_empty() {
        return Err(TrainingError::NoCandidates);
    }
    let n = split.train.len();
    if n < 2 {
        return Err(TrainingError::Data(DataError::EmptySet));
    }
    let val_len = (n / 10).max(1);
    let (train_part, val_part) = split.train.split_at(n - val_len);

    let mut betas: Vec<f64> = candidate_betas.to_vec();
    betas.sort_by(|a, b| a.partial_cmp(b).expect("finite betas"));

    let mut candidates = Vec::with_capacity(betas.len());
    let mut best: Option<(f64, f64)> = None; // (score, beta)
    for beta in betas {
        let config = TrainConfig {
            loss_beta: beta,
            lr_stages: budget_stages(&base.lr_stages, budget_epochs),
            ..base.clone()
        };
        let mut model = Model::<T>::new(model_config.clone())?;
        model.init_parameters(None, config.seed)?;
        fit(&mut model, train_part, stats, preprocess_cfg, &config, None, None)?;

        let errors = evaluate(&model, val_part, stats, preprocess_cfg, config.batch_size)?;
        let median_t_m = median(&errors.t_errors())?;
        let median_q_deg = median(&errors.q_errors())?;
        let score = median_t_m + median_q_deg.to_radians();
        candidates.push(BetaCandidateReport { beta, median_t_m, median_q_deg, score });
        if best.map_or(true, |(s, _)| score < s) {
            best = Some((score, beta));
        }
    }
    Ok(BetaSearchReport {
        best_beta: best.expect("at least one candidate").1,
        candidates,
    })
}
