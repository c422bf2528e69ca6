//! Hourglass pose-regression network: construction, execution in train
//! and eval modes, initialization, and checkpoint I/O.

mod blocks;
pub mod checkpoint;
pub mod layers;
mod params;

pub use blocks::{Decoder, Encoder, EncoderOut, Regressor};
pub use checkpoint::{load_checkpoint, load_store, model_from_checkpoint, save_checkpoint, save_store};
pub use params::{count_parameters, EntryKind, EntryMut, EntryRef, HasEntries, ParameterStore, TensorData};

use ndarray::{s, Array2, Array4};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Elem;
use blocks::{DecoderTrace, EncoderTrace, RegressorTrace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("model parameters have not been initialized")]
    UninitializedModel,
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {reason}")]
    CorruptCheckpoint { reason: String },
}

/// Skip-aggregation mode: `Concat` stacks decoder and encoder channels,
/// `Sum` adds the feature maps element-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkVariant {
    Concat,
    Sum,
}

impl std::fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetworkVariant::Concat => write!(f, "concat"),
            NetworkVariant::Sum => write!(f, "sum"),
        }
    }
}

/// Topology description. Defaults reproduce the full-scale network;
/// `width_multiplier` shrinks every channel count and the hidden width
/// (rounded up) for desk-scale tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: NetworkVariant,
    pub input_hw: (usize, usize),
    pub encoder_channels: Vec<usize>,
    pub encoder_block_counts: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub final_conv_channels: usize,
    pub regressor_hidden: usize,
    pub dropout_prob: f64,
    pub width_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: NetworkVariant::Sum,
            input_hw: (224, 224),
            encoder_channels: vec![64, 64, 128, 256, 512],
            encoder_block_counts: vec![3, 4, 6, 3],
            decoder_channels: vec![256, 128, 64],
            final_conv_channels: 32,
            regressor_hidden: 2048,
            dropout_prob: 0.5,
            width_multiplier: 1.0,
        }
    }
}

/// Channel counts after applying the width multiplier.
#[derive(Debug, Clone)]
pub(crate) struct EffectiveDims {
    pub stem: usize,
    pub stages: [usize; 4],
    pub block_counts: [usize; 4],
    pub decoder: [usize; 3],
    pub final_conv: usize,
    pub hidden: usize,
    pub dropout_prob: f64,
}

/// Expected `[channels, height, width]` of every named stage for a given
/// configuration, plus the regressor widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub stem_conv: (usize, usize, usize),
    pub stem_pool: (usize, usize, usize),
    pub stages: [(usize, usize, usize); 4],
    /// UpConv1-3 then the final convolution (block outputs, pre-aggregation).
    pub decoder: [(usize, usize, usize); 4],
    pub flatten: usize,
    pub hidden: usize,
    pub heads: (usize, usize),
}

impl ModelConfig {
    /// Desk-scale preset used by gradient checks and overfit tests.
    pub fn tiny(variant: NetworkVariant) -> Self {
        Self {
            variant,
            input_hw: (32, 32),
            width_multiplier: 0.125,
            dropout_prob: 0.5,
            ..Self::default()
        }
    }

    fn scaled(&self, base: usize) -> usize {
        (base as f64 * self.width_multiplier).ceil() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.encoder_channels.len() != 5 {
            return fail(format!(
                "encoder_channels must have 5 entries (stem + 4 stages), got {}",
                self.encoder_channels.len()
            ));
        }
        if self.encoder_block_counts.len() != 4 {
            return fail(format!(
                "encoder_block_counts must have 4 entries, got {}",
                self.encoder_block_counts.len()
            ));
        }
        if self.decoder_channels.len() != 3 {
            return fail(format!(
                "decoder_channels must have 3 entries, got {}",
                self.decoder_channels.len()
            ));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return fail(format!("input_hw {h}x{w} must be a positive multiple of 32"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return fail(format!(
                "width_multiplier {} outside (0, 1]",
                self.width_multiplier
            ));
        }
        if self
            .encoder_channels
            .iter()
            .chain(self.decoder_channels.iter())
            .any(|&c| c == 0)
            || self.final_conv_channels == 0
            || self.regressor_hidden == 0
        {
            return fail("zero-width layer".to_string());
        }
        if self.encoder_block_counts.iter().any(|&c| c == 0) {
            return fail("every encoder stage needs at least one block".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return fail(format!("dropout_prob {} outside [0, 1)", self.dropout_prob));
        }
        if matches!(self.variant, NetworkVariant::Sum) {
            // sum aggregation needs matching channel counts, no projections
            for (i, (dec, enc)) in [
                (self.decoder_channels[0], self.encoder_channels[3]),
                (self.decoder_channels[1], self.encoder_channels[2]),
                (self.decoder_channels[2], self.encoder_channels[1]),
            ]
            .into_iter()
            .enumerate()
            {
                if dec != enc {
                    return fail(format!(
                        "sum variant: decoder_channels[{i}] = {dec} must equal the matching encoder stage width {enc}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn dims(&self) -> Result<EffectiveDims, ModelError> {
        self.validate()?;
        Ok(EffectiveDims {
            stem: self.scaled(self.encoder_channels[0]),
            stages: [
                self.scaled(self.encoder_channels[1]),
                self.scaled(self.encoder_channels[2]),
                self.scaled(self.encoder_channels[3]),
                self.scaled(self.encoder_channels[4]),
            ],
            block_counts: [
                self.encoder_block_counts[0],
                self.encoder_block_counts[1],
                self.encoder_block_counts[2],
                self.encoder_block_counts[3],
            ],
            decoder: [
                self.scaled(self.decoder_channels[0]),
                self.scaled(self.decoder_channels[1]),
                self.scaled(self.decoder_channels[2]),
            ],
            final_conv: self.scaled(self.final_conv_channels),
            hidden: self.scaled(self.regressor_hidden),
            dropout_prob: self.dropout_prob,
        })
    }

    /// Stride arithmetic for every stage, without building the network.
    pub fn shape_plan(&self) -> Result<ShapePlan, ModelError> {
        let dims = self.dims()?;
        let (h, w) = self.input_hw;
        let stem_conv = (dims.stem, h / 2, w / 2);
        let stem_pool = (dims.stem, h / 4, w / 4);
        let stages = [
            (dims.stages[0], h / 4, w / 4),
            (dims.stages[1], h / 8, w / 8),
            (dims.stages[2], h / 16, w / 16),
            (dims.stages[3], h / 32, w / 32),
        ];
        let decoder = [
            (dims.decoder[0], h / 16, w / 16),
            (dims.decoder[1], h / 8, w / 8),
            (dims.decoder[2], h / 4, w / 4),
            (dims.final_conv, h / 4, w / 4),
        ];
        let flatten = dims.final_conv * (h / 4) * (w / 4);
        Ok(ShapePlan {
            stem_conv,
            stem_pool,
            stages,
            decoder,
            flatten,
            hidden: dims.hidden,
            heads: (4, 3),
        })
    }
}

/// Raw network output for one image: an unnormalized quaternion and a
/// translation. Normalization happens at evaluation time, not here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub q_raw: [f64; 4],
    pub t: [f64; 3],
}

/// Batched network output.
#[derive(Debug, Clone)]
pub struct PoseBatch<T> {
    pub q_raw: Array2<T>, // [n, 4]
    pub t: Array2<T>,     // [n, 3]
}

impl<T: Elem> PoseBatch<T> {
    pub fn len(&self) -> usize {
        self.q_raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prediction(&self, i: usize) -> PosePrediction {
        PosePrediction {
            q_raw: [
                self.q_raw[[i, 0]].into_f64(),
                self.q_raw[[i, 1]].into_f64(),
                self.q_raw[[i, 2]].into_f64(),
                self.q_raw[[i, 3]].into_f64(),
            ],
            t: [
                self.t[[i, 0]].into_f64(),
                self.t[[i, 1]].into_f64(),
                self.t[[i, 2]].into_f64(),
            ],
        }
    }

    pub fn predictions(&self) -> Vec<PosePrediction> {
        (0..self.len()).map(|i| self.prediction(i)).collect()
    }
}

/// Combines a decoder feature map with an encoder skip map.
pub fn aggregate_skip<T: Elem>(
    decoder_fm: &Array4<T>,
    encoder_fm: &Array4<T>,
    variant: NetworkVariant,
) -> Result<Array4<T>, ModelError> {
    let (dn, dc, dh, dw) = decoder_fm.dim();
    let (en, ec, eh, ew) = encoder_fm.dim();
    if dn != en || dh != eh || dw != ew {
        return Err(ModelError::ShapeMismatch {
            context: format!(
                "skip aggregation: decoder {:?} vs encoder {:?}",
                decoder_fm.dim(),
                encoder_fm.dim()
            ),
        });
    }
    match variant {
        NetworkVariant::Sum => {
            if dc != ec {
                return Err(ModelError::ShapeMismatch {
                    context: format!("sum aggregation needs equal channels: {dc} vs {ec}"),
                });
            }
            Ok(decoder_fm + encoder_fm)
        }
        NetworkVariant::Concat => {
            // keep the result in standard layout for the convolution kernels
            let mut out = Array4::<T>::zeros((dn, dc + ec, dh, dw));
            out.slice_mut(s![.., ..dc, .., ..]).assign(decoder_fm);
            out.slice_mut(s![.., dc.., .., ..]).assign(encoder_fm);
            Ok(out)
        }
    }
}

/// Gradient of [`aggregate_skip`]: splits the downstream gradient into
/// (decoder-side, encoder-side) parts.
pub fn aggregate_skip_backward<T: Elem>(
    grad: &Array4<T>,
    decoder_channels: usize,
    variant: NetworkVariant,
) -> (Array4<T>, Array4<T>) {
    match variant {
        NetworkVariant::Sum => (grad.clone(), grad.clone()),
        NetworkVariant::Concat => (
            grad.slice(s![.., ..decoder_channels, .., ..]).to_owned(),
            grad.slice(s![.., decoder_channels.., .., ..]).to_owned(),
        ),
    }
}

/// Builds the encoder alone (the feature-extractor backbone).
pub fn build_encoder<T: Elem>(config: &ModelConfig) -> Result<Encoder<T>, ModelError> {
    Ok(Encoder::new(&config.dims()?))
}

/// Builds the decoder alone.
pub fn build_decoder<T: Elem>(config: &ModelConfig) -> Result<Decoder<T>, ModelError> {
    Ok(Decoder::new(&config.dims()?, config.variant))
}

/// Builds the regressor alone; its input width follows from the decoder
/// output shape.
pub fn build_regressor<T: Elem>(config: &ModelConfig) -> Result<Regressor<T>, ModelError> {
    let dims = config.dims()?;
    let plan = config.shape_plan()?;
    Ok(Regressor::new(&dims, plan.flatten))
}

/// Execution mode for [`Model::forward`].
pub enum ForwardMode<'a> {
    Eval,
    /// Training mode: dropout active (random numbers drawn from the given
    /// stream), batch norm uses batch statistics and advances its running
    /// estimates.
    Train(&'a mut ChaCha8Rng),
}

/// Everything the backward pass needs from a training-mode forward pass.
pub struct ModelTrace<T> {
    enc: EncoderTrace<T>,
    dec: DecoderTrace<T>,
    reg: RegressorTrace<T>,
}

/// The full hourglass network.
#[derive(Debug, Clone)]
pub struct Model<T: Elem> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub regressor: Regressor<T>,
    initialized: bool,
}

impl<T: Elem> Model<T> {
    /// Builds the graph with zeroed parameters; call
    /// [`Model::init_parameters`] (or load a checkpoint) before running it.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let dims = config.dims()?;
        let plan = config.shape_plan()?;
        Ok(Self {
            encoder: Encoder::new(&dims),
            decoder: Decoder::new(&dims, config.variant),
            regressor: Regressor::new(&dims, plan.flatten),
            config,
            initialized: false,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Accepts the all-zero parameter state as initialized. Useful for
    /// shape checks; a zero network predicts the zero pose.
    pub fn init_zero(&mut self) {
        self.initialized = true;
    }

    fn check_input(&self, x: &Array4<T>) -> Result<(), ModelError> {
        if !self.initialized {
            return Err(ModelError::UninitializedModel);
        }
        let (_, c, h, w) = x.dim();
        if c != 3 || (h, w) != self.config.input_hw {
            return Err(ModelError::ShapeMismatch {
                context: format!(
                    "expected input [n, 3, {}, {}], got {:?}",
                    self.config.input_hw.0,
                    self.config.input_hw.1,
                    x.dim()
                ),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, images: &Array4<T>, mode: ForwardMode<'_>) -> Result<PoseBatch<T>, ModelError> {
        match mode {
            ForwardMode::Eval => self.forward_eval(images),
            ForwardMode::Train(rng) => Ok(self.forward_train(images, rng)?.0),
        }
    }

    /// Deterministic inference: dropout disabled, batch norm frozen on its
    /// running statistics. Takes `&self` and mutates nothing.
    pub fn forward_eval(&self, images: &Array4<T>) -> Result<PoseBatch<T>, ModelError> {
        self.check_input(images)?;
        let enc = self.encoder.forward_eval(images);
        let dec = self.decoder.forward_eval(&enc)?;
        let (q, t) = self.regressor.forward_eval(&dec);
        Ok(PoseBatch { q_raw: q, t })
    }

    pub fn forward_train(
        &mut self,
        images: &Array4<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(PoseBatch<T>, ModelTrace<T>), ModelError> {
        self.check_input(images)?;
        let (enc_out, enc_trace) = self.encoder.forward_train(images);
        let (dec_out, dec_trace) = self.decoder.forward_train(&enc_out)?;
        let (q, t, reg_trace) = self.regressor.forward_train(&dec_out, rng);
        Ok((
            PoseBatch { q_raw: q, t },
            ModelTrace { enc: enc_trace, dec: dec_trace, reg: reg_trace },
        ))
    }

    /// Differentiable forward with inference semantics: batch norm frozen
    /// on its running statistics, dropout inactive. Produces the same
    /// values as [`Model::forward_eval`] plus a trace for
    /// [`Model::backward`]. Used by gradient verification, where the
    /// frozen function's mild curvature suits finite differencing.
    pub fn forward_frozen(
        &mut self,
        images: &Array4<T>,
    ) -> Result<(PoseBatch<T>, ModelTrace<T>), ModelError> {
        self.check_input(images)?;
        let (enc_out, enc_trace) = self.encoder.forward_frozen(images);
        let (dec_out, dec_trace) = self.decoder.forward_frozen(&enc_out)?;
        let (q, t, reg_trace) = self.regressor.forward_frozen(&dec_out);
        Ok((
            PoseBatch { q_raw: q, t },
            ModelTrace { enc: enc_trace, dec: dec_trace, reg: reg_trace },
        ))
    }

    /// Accumulates parameter gradients from head gradients; returns the
    /// gradient with respect to the input images.
    pub fn backward(
        &mut self,
        trace: &ModelTrace<T>,
        grad_q: &Array2<T>,
        grad_t: &Array2<T>,
    ) -> Array4<T> {
        let g_dec = self.regressor.backward(&trace.reg, grad_q, grad_t);
        let stage_grads = self.decoder.backward(&trace.dec, &g_dec);
        let [g_s1, g_s2, g_s3, g_s4] = stage_grads;
        self.encoder.backward(&trace.enc, [g_s1, g_s2, g_s3, g_s4])
    }

    pub fn zero_grads(&mut self) {
        self.visit_entries_mut(&mut |e| {
            if let Some(g) = e.grad {
                g.fill(T::zero());
            }
        });
    }

    /// Fan-based uniform initialization (bound `sqrt(6 / (fan_in + fan_out))`)
    /// for convolution and fully-connected weights; zero biases; batch-norm
    /// scale 1 / shift 0; running stats reset. When `pretrained` is given,
    /// its entries are then copied over the matching names.
    pub fn init_parameters(
        &mut self,
        pretrained: Option<&ParameterStore>,
        seed: u64,
    ) -> Result<(), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_entries_mut(&mut |e| {
            match e.kind {
                EntryKind::ConvWeight | EntryKind::FcWeight => {
                    let (fan_in, fan_out) = fans(e.kind, &e.shape);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    for v in e.data.iter_mut() {
                        *v = T::from_f64(dist.sample(&mut rng));
                    }
                }
                EntryKind::ConvBias | EntryKind::FcBias | EntryKind::BnShift => {
                    e.data.fill(T::zero())
                }
                EntryKind::BnScale => e.data.fill(T::one()),
                EntryKind::BnRunningMean => e.data.fill(T::zero()),
                EntryKind::BnRunningVar => e.data.fill(T::one()),
            }
        });
        if let Some(store) = pretrained {
            self.import_store(store)?;
        }
        self.initialized = true;
        Ok(())
    }

    /// Copies every tensor of `store` onto the entry with the same name.
    /// Unknown names or shape disagreements are errors.
    fn import_store(&mut self, store: &ParameterStore) -> Result<(), ModelError> {
        let mut seen = std::collections::HashSet::new();
        let mut error: Option<ModelError> = None;
        self.visit_entries_mut(&mut |e| {
            if let Some(tensor) = store.get(&e.name) {
                seen.insert(e.name.clone());
                if tensor.shape != e.shape {
                    if error.is_none() {
                        error = Some(ModelError::ShapeMismatch {
                            context: format!(
                                "pretrained tensor '{}' has shape {:?}, model expects {:?}",
                                e.name, tensor.shape, e.shape
                            ),
                        });
                    }
                    return;
                }
                for (dst, src) in e.data.iter_mut().zip(tensor.data.iter()) {
                    *dst = T::from_f64(*src as f64);
                }
            }
        });
        if let Some(err) = error {
            return Err(err);
        }
        for (name, _) in store.iter() {
            if !seen.contains(name) {
                return Err(ModelError::ShapeMismatch {
                    context: format!("pretrained tensor '{name}' does not exist in the model"),
                });
            }
        }
        Ok(())
    }

    /// Exports every parameter and buffer as f32 tensors, in canonical order.
    pub fn state_dict(&self) -> ParameterStore {
        let mut store = ParameterStore::new();
        self.visit_entries(&mut |e| {
            store
                .insert(
                    e.name.clone(),
                    TensorData {
                        shape: e.shape.clone(),
                        data: e.data.iter().map(|v| v.into_f64() as f32).collect(),
                    },
                )
                .expect("canonical names are unique");
        });
        store
    }

    /// Strict inverse of [`Model::state_dict`]: every model entry must be
    /// present with the right shape and no extra tensors may remain.
    pub fn load_state_dict(&mut self, store: &ParameterStore) -> Result<(), ModelError> {
        let mut expected = 0usize;
        let mut error: Option<ModelError> = None;
        self.visit_entries_mut(&mut |e| {
            expected += 1;
            match store.get(&e.name) {
                Some(tensor) if tensor.shape == e.shape => {
                    for (dst, src) in e.data.iter_mut().zip(tensor.data.iter()) {
                        *dst = T::from_f64(*src as f64);
                    }
                }
                Some(tensor) => {
                    if error.is_none() {
                        error = Some(ModelError::CorruptCheckpoint {
                            reason: format!(
                                "tensor '{}' has shape {:?}, model expects {:?}",
                                e.name, tensor.shape, e.shape
                            ),
                        });
                    }
                }
                None => {
                    if error.is_none() {
                        error = Some(ModelError::CorruptCheckpoint {
                            reason: format!("tensor '{}' missing from checkpoint", e.name),
                        });
                    }
                }
            }
        });
        if let Some(err) = error {
            return Err(err);
        }
        if store.len() != expected {
            return Err(ModelError::CorruptCheckpoint {
                reason: format!(
                    "checkpoint holds {} tensors, model has {expected}",
                    store.len()
                ),
            });
        }
        self.initialized = true;
        Ok(())
    }

    /// Total trainable parameter count (running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        count_parameters(self)
    }
}

impl<T: Elem> HasEntries<T> for Model<T> {
    fn visit_entries(&self, f: &mut dyn FnMut(EntryRef<'_, T>)) {
        self.encoder.visit_entries(f);
        self.decoder.visit_entries(f);
        self.regressor.visit_entries(f);
    }

    fn visit_entries_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, T>)) {
        self.encoder.visit_entries_mut(f);
        self.decoder.visit_entries_mut(f);
        self.regressor.visit_entries_mut(f);
    }
}

fn fans(kind: EntryKind, shape: &[usize]) -> (usize, usize) {
    match kind {
        EntryKind::ConvWeight => {
            let receptive = shape[2] * shape[3];
            (shape[1] * receptive, shape[0] * receptive)
        }
        EntryKind::FcWeight => (shape[1], shape[0]),
        _ => unreachable!("fans only defined for weights"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_matches_published_plan() {
        let cfg = ModelConfig::default();
        let plan = cfg.shape_plan().unwrap();
        assert_eq!(plan.stem_conv, (64, 112, 112));
        assert_eq!(plan.stem_pool, (64, 56, 56));
        assert_eq!(
            plan.stages,
            [(64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)]
        );
        assert_eq!(
            plan.decoder,
            [(256, 14, 14), (128, 28, 28), (64, 56, 56), (32, 56, 56)]
        );
        assert_eq!(plan.flatten, 32 * 56 * 56);
        assert_eq!(plan.hidden, 2048);
        assert_eq!(plan.heads, (4, 3));
    }

    #[test]
    fn width_multiplier_quarters_channels() {
        let cfg = ModelConfig {
            width_multiplier: 0.25,
            ..ModelConfig::default()
        };
        let plan = cfg.shape_plan().unwrap();
        assert_eq!(plan.stem_conv.0, 16);
        assert_eq!(plan.stages.map(|s| s.0), [16, 32, 64, 128]);
        assert_eq!(plan.decoder.map(|s| s.0), [64, 32, 16, 8]);
        assert_eq!(plan.hidden, 512);
    }

    #[test]
    fn shape_plan_64_input_quarter_width() {
        let cfg = ModelConfig {
            width_multiplier: 0.25,
            input_hw: (64, 64),
            ..ModelConfig::default()
        };
        let plan = cfg.shape_plan().unwrap();
        assert_eq!(plan.stages[3], (128, 2, 2));
        assert_eq!(plan.decoder[3], (8, 16, 16));
        assert_eq!(plan.flatten, 8 * 16 * 16);
        assert_eq!(plan.heads, (4, 3));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.input_hw = (100, 224);
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig { .. })));

        let mut cfg = ModelConfig::default();
        cfg.regressor_hidden = 0;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig { .. })));

        let mut cfg = ModelConfig::default();
        cfg.decoder_channels = vec![256, 128, 32];
        // sum variant needs matching skip widths
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig { .. })));
        cfg.variant = NetworkVariant::Concat;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn aggregate_skip_sum_identity_and_concat_shapes() {
        let dec = Array4::<f64>::from_elem((1, 8, 4, 4), 1.5);
        let zero = Array4::<f64>::zeros((1, 8, 4, 4));
        let sum = aggregate_skip(&dec, &zero, NetworkVariant::Sum).unwrap();
        assert_eq!(sum, dec);

        let cat = aggregate_skip(&dec, &dec, NetworkVariant::Concat).unwrap();
        assert_eq!(cat.dim(), (1, 16, 4, 4));

        let bad = Array4::<f64>::zeros((1, 4, 4, 4));
        assert!(matches!(
            aggregate_skip(&dec, &bad, NetworkVariant::Sum),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_skip_sum_matches_scalar_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Array4::<f64>::from_shape_simple_fn((2, 3, 4, 5), || rng.gen_range(-1.0..1.0));
        let b = Array4::<f64>::from_shape_simple_fn((2, 3, 4, 5), || rng.gen_range(-1.0..1.0));
        let s = aggregate_skip(&a, &b, NetworkVariant::Sum).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        assert_eq!(s[[n, c, h, w]], a[[n, c, h, w]] + b[[n, c, h, w]]);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_channel_order_decoder_first() {
        let dec = Array4::<f64>::from_elem((1, 2, 1, 1), 1.0);
        let enc = Array4::<f64>::from_elem((1, 2, 1, 1), 2.0);
        let cat = aggregate_skip(&dec, &enc, NetworkVariant::Concat).unwrap();
        assert_eq!(cat[[0, 0, 0, 0]], 1.0);
        assert_eq!(cat[[0, 2, 0, 0]], 2.0);
        let (gd, ge) = aggregate_skip_backward(&cat, 2, NetworkVariant::Concat);
        assert_eq!(gd[[0, 0, 0, 0]], 1.0);
        assert_eq!(ge[[0, 0, 0, 0]], 2.0);
    }

    #[test]
    fn forward_requires_initialization() {
        let mut model = Model::<f32>::new(ModelConfig::tiny(NetworkVariant::Sum)).unwrap();
        let x = Array4::<f32>::zeros((1, 3, 32, 32));
        assert!(matches!(
            model.forward_eval(&x),
            Err(ModelError::UninitializedModel)
        ));
        model.init_zero();
        assert!(model.forward_eval(&x).is_ok());
        // wrong spatial size
        let bad = Array4::<f32>::zeros((1, 3, 64, 64));
        assert!(matches!(
            model.forward_eval(&bad),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn xavier_bound_statistics() {
        // the empirical std of U(-b, b) with b = sqrt(6/(fan_in+fan_out))
        // is sqrt(2/(fan_in+fan_out))
        let mut model = Model::<f64>::new(ModelConfig {
            variant: NetworkVariant::Sum,
            input_hw: (32, 32),
            width_multiplier: 1.0,
            ..ModelConfig::default()
        })
        .unwrap();
        model.init_parameters(None, 7).unwrap();
        let mut checked = 0;
        model.visit_entries(&mut |e| {
            if e.name == "encoder.resblock4.0.conv2.weight" {
                // 512*512*9 > 2e6 elements
                let n = e.data.len() as f64;
                let mean: f64 = e.data.iter().map(|v| v.into_f64()).sum::<f64>() / n;
                let var: f64 =
                    e.data.iter().map(|v| (v.into_f64() - mean).powi(2)).sum::<f64>() / n;
                let expected = (2.0_f64 / (512.0 * 9.0 + 512.0 * 9.0)).sqrt();
                assert!((var.sqrt() - expected).abs() / expected < 0.05);
                checked += 1;
            }
        });
        assert_eq!(checked, 1);
    }
}
