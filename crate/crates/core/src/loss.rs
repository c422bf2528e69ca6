//! Weighted pose objective: Euclidean translation error plus `beta` times
//! the Euclidean distance between the target quaternion and the normalized
//! predicted quaternion.
//!
//! Everything here is computed in f64 regardless of the model's element
//! type, so the reported terms satisfy
//! `total = translation_term + beta * orientation_term` to full precision.
//! No hemisphere alignment is applied; targets are sign-canonicalized at
//! ingestion instead.

use thiserror::Error;

use crate::geometry::Pose;
use crate::model::PosePrediction;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("predicted quaternion norm {norm:e} is degenerate")]
    ZeroNormPrediction { norm: f64 },
    #[error("target quaternion norm {norm} is not unit")]
    NonUnitTarget { norm: f64 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("prediction batch has {preds} entries, target batch {targets}")]
    BatchSizeMismatch { preds: usize, targets: usize },
    #[error("beta {beta} must be positive")]
    InvalidBeta { beta: f64 },
}

/// Loss weighting. The orientation scale factor is tuned per scene by grid
/// search; useful values lie in `[1, 10]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub beta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl LossParams {
    pub fn new(beta: f64) -> Result<Self, LossError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(LossError::InvalidBeta { beta });
        }
        Ok(Self { beta })
    }
}

/// Loss with its two terms kept separate. The orientation term is pre-beta:
/// `total = translation_term + beta_used * orientation_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub translation_term: f64,
    pub orientation_term: f64,
    pub beta_used: f64,
}

/// Gradient of the loss with respect to one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGrad {
    pub d_q_raw: [f64; 4],
    pub d_t: [f64; 3],
}

fn norm4(v: [f64; 4]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm3(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_inputs(pred: &PosePrediction, target: &Pose) -> Result<(f64, f64), LossError> {
    let target_norm = target.q.norm();
    if (target_norm - 1.0).abs() > 1e-6 {
        return Err(LossError::NonUnitTarget { norm: target_norm });
    }
    let pred_norm = norm4(pred.q_raw);
    if pred_norm <= 1e-12 {
        return Err(LossError::ZeroNormPrediction { norm: pred_norm });
    }
    Ok((pred_norm, target_norm))
}

/// Loss for one sample.
pub fn pose_loss(
    pred: &PosePrediction,
    target: &Pose,
    params: &LossParams,
) -> Result<LossValue, LossError> {
    Ok(pose_loss_with_grad(pred, target, params)?.0)
}

/// Loss and its analytic gradient with respect to the raw prediction.
/// At the (zero-norm) kinks of either term the zero subgradient is used.
pub fn pose_loss_with_grad(
    pred: &PosePrediction,
    target: &Pose,
    params: &LossParams,
) -> Result<(LossValue, PoseGrad), LossError> {
    if !(params.beta > 0.0 && params.beta.is_finite()) {
        return Err(LossError::InvalidBeta { beta: params.beta });
    }
    let (pred_norm, _) = check_inputs(pred, target)?;

    let tq = target.q.as_array();
    let tt = target.t.as_array();

    // translation term
    let e_t = [
        tt[0] - pred.t[0],
        tt[1] - pred.t[1],
        tt[2] - pred.t[2],
    ];
    let translation_term = norm3(e_t);
    let d_t = if translation_term > 0.0 {
        // d||t - t_hat||/d t_hat = (t_hat - t)/||t - t_hat||
        [
            -e_t[0] / translation_term,
            -e_t[1] / translation_term,
            -e_t[2] / translation_term,
        ]
    } else {
        [0.0; 3]
    };

    // orientation term on the normalized prediction
    let u = [
        pred.q_raw[0] / pred_norm,
        pred.q_raw[1] / pred_norm,
        pred.q_raw[2] / pred_norm,
        pred.q_raw[3] / pred_norm,
    ];
    let e_q = [tq[0] - u[0], tq[1] - u[1], tq[2] - u[2], tq[3] - u[3]];
    let orientation_term = norm4(e_q);
    let d_q_raw = if orientation_term > 0.0 {
        // chain rule through u = q_raw/||q_raw||:
        // d term/d q_raw = -beta/||q_raw|| (I - u u^T) (e_q/term)
        let e_hat = [
            e_q[0] / orientation_term,
            e_q[1] / orientation_term,
            e_q[2] / orientation_term,
            e_q[3] / orientation_term,
        ];
        let u_dot_e = u[0] * e_hat[0] + u[1] * e_hat[1] + u[2] * e_hat[2] + u[3] * e_hat[3];
        let scale = -params.beta / pred_norm;
        [
            scale * (e_hat[0] - u[0] * u_dot_e),
            scale * (e_hat[1] - u[1] * u_dot_e),
            scale * (e_hat[2] - u[2] * u_dot_e),
            scale * (e_hat[3] - u[3] * u_dot_e),
        ]
    } else {
        [0.0; 4]
    };

    let value = LossValue {
        total: translation_term + params.beta * orientation_term,
        translation_term,
        orientation_term,
        beta_used: params.beta,
    };
    Ok((value, PoseGrad { d_q_raw, d_t }))
}

/// Arithmetic mean of the per-sample losses (and their terms).
pub fn batch_pose_loss(
    preds: &[PosePrediction],
    targets: &[Pose],
    params: &LossParams,
) -> Result<LossValue, LossError> {
    Ok(batch_pose_loss_with_grads(preds, targets, params)?.0)
}

/// Mean loss plus per-sample gradients, already scaled by `1/n`.
pub fn batch_pose_loss_with_grads(
    preds: &[PosePrediction],
    targets: &[Pose],
    params: &LossParams,
) -> Result<(LossValue, Vec<PoseGrad>), LossError> {
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if preds.len() != targets.len() {
        return Err(LossError::BatchSizeMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    let n = preds.len() as f64;
    let mut sum_t = 0.0;
    let mut sum_q = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (pred, target) in preds.iter().zip(targets) {
        let (value, mut grad) = pose_loss_with_grad(pred, target, params)?;
        sum_t += value.translation_term;
        sum_q += value.orientation_term;
        for g in grad.d_q_raw.iter_mut() {
            *g /= n;
        }
        for g in grad.d_t.iter_mut() {
            *g /= n;
        }
        grads.push(grad);
    }
    let translation_term = sum_t / n;
    let orientation_term = sum_q / n;
    Ok((
        LossValue {
            total: translation_term + params.beta * orientation_term,
            translation_term,
            orientation_term,
            beta_used: params.beta,
        },
        grads,
    ))
}
