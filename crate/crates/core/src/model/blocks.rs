//! Encoder, decoder and regressor assemblies.
//!
//! The encoder is a 34-layer residual classifier backbone with the
//! classification head removed: a 7x7 stride-2 stem convolution, a 3x3
//! stride-2 max pool, then four residual stages with block counts
//! [3, 4, 6, 3]. Stages 2-4 downsample by stride-2 in their first block.
//! The decoder is a chain of three 4x4 up-convolutions (zero-insertion
//! upsampling + ordinary convolution) and a final 3x3 convolution, each as
//! a Conv-ReLU-BatchNorm sequence. Encoder stage outputs are routed to the
//! decoder through skip connections: stage 4 feeds the decoder input,
//! stages 3/2/1 are aggregated into the outputs of UpConv1/2/3.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    relu4, relu4_backward, zero_insert_2x, zero_insert_2x_backward, BatchNorm, BatchNormCache,
    Conv2d, Dropout, Linear, MaxPool2d, MaxPoolCache,
};
use super::params::{EntryMut, EntryRef, HasEntries};
use super::{aggregate_skip, aggregate_skip_backward, EffectiveDims, ModelError, NetworkVariant};
use crate::Elem;

/// Stem: 7x7 stride-2 convolution, batch norm, ReLU, 3x3 stride-2 max pool.
#[derive(Debug, Clone)]
pub struct Stem<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub pool: MaxPool2d,
}

pub struct StemTrace<T> {
    x: Array4<T>,
    bn: BatchNormCache<T>,
    relu_y: Array4<T>,
    pool: MaxPoolCache,
}

impl<T: Elem> Stem<T> {
    fn new(out_c: usize) -> Self {
        Self {
            conv: Conv2d::new(out_c, 3, 7, 2, 3, false),
            bn: BatchNorm::new(out_c),
            pool: MaxPool2d { kernel: 3, stride: 2, padding: 1 },
        }
    }

    fn forward_full(&mut self, x: &Array4<T>, frozen: bool) -> (Array4<T>, StemTrace<T>) {
        let c = self.conv.forward(x);
        let (b, bn_cache) = if frozen {
            self.bn.forward_frozen(&c)
        } else {
            self.bn.forward_train(&c)
        };
        let r = relu4(&b);
        let (y, pool_cache) = self.pool.forward(&r);
        (
            y,
            StemTrace { x: x.clone(), bn: bn_cache, relu_y: r, pool: pool_cache },
        )
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let c = self.conv.forward(x);
        let b = self.bn.forward_eval(&c);
        self.pool.forward(&relu4(&b)).0
    }

    fn backward(&mut self, trace: &StemTrace<T>, grad_out: &Array4<T>) -> Array4<T> {
        let g = self.pool.backward(&trace.pool, grad_out);
        let g = relu4_backward(&g, &trace.relu_y);
        let g = self.bn.backward(&trace.bn, &g);
        self.conv.backward(&trace.x, &g)
    }
}

/// Two 3x3 convolutions with batch norm and an identity (or 1x1
/// projection) shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub downsample: Option<(Conv2d<T>, BatchNorm<T>)>,
}

pub struct ResidualBlockTrace<T> {
    x: Array4<T>,
    bn1: BatchNormCache<T>,
    y1: Array4<T>,
    bn2: BatchNormCache<T>,
    down_bn: Option<BatchNormCache<T>>,
    y: Array4<T>,
}

impl<T: Elem> ResidualBlock<T> {
    fn new(in_c: usize, out_c: usize, stride: usize) -> Self {
        let downsample = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(out_c, in_c, 1, stride, 0, false),
                BatchNorm::new(out_c),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2d::new(out_c, in_c, 3, stride, 1, false),
            bn1: BatchNorm::new(out_c),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, false),
            bn2: BatchNorm::new(out_c),
            downsample,
        }
    }

    fn forward_full(&mut self, x: &Array4<T>, frozen: bool) -> (Array4<T>, ResidualBlockTrace<T>) {
        let bn_fwd = |bn: &mut BatchNorm<T>, v: &Array4<T>| if frozen {
            bn.forward_frozen(v)
        } else {
            bn.forward_train(v)
        };
        let a1 = self.conv1.forward(x);
        let (b1, bn1_cache) = bn_fwd(&mut self.bn1, &a1);
        let y1 = relu4(&b1);
        let a2 = self.conv2.forward(&y1);
        let (b2, bn2_cache) = bn_fwd(&mut self.bn2, &a2);
        let (shortcut, down_bn) = match &mut self.downsample {
            Some((conv, bn)) => {
                let d = conv.forward(x);
                let (db, cache) = bn_fwd(bn, &d);
                (db, Some(cache))
            }
            None => (x.clone(), None),
        };
        let y = relu4(&(&b2 + &shortcut));
        (
            y.clone(),
            ResidualBlockTrace { x: x.clone(), bn1: bn1_cache, y1, bn2: bn2_cache, down_bn, y },
        )
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let y1 = relu4(&self.bn1.forward_eval(&self.conv1.forward(x)));
        let b2 = self.bn2.forward_eval(&self.conv2.forward(&y1));
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward_eval(&conv.forward(x)),
            None => x.clone(),
        };
        relu4(&(&b2 + &shortcut))
    }

    fn backward(&mut self, trace: &ResidualBlockTrace<T>, grad_out: &Array4<T>) -> Array4<T> {
        let g_pre = relu4_backward(grad_out, &trace.y);
        // main branch
        let g_a2 = self.bn2.backward(&trace.bn2, &g_pre);
        let g_y1 = self.conv2.backward(&trace.y1, &g_a2);
        let g_b1 = relu4_backward(&g_y1, &trace.y1);
        let g_a1 = self.bn1.backward(&trace.bn1, &g_b1);
        let mut g_x = self.conv1.backward(&trace.x, &g_a1);
        // shortcut branch
        match &mut self.downsample {
            Some((conv, bn)) => {
                let g_d = bn.backward(trace.down_bn.as_ref().unwrap(), &g_pre);
                g_x += &conv.backward(&trace.x, &g_d);
            }
            None => g_x += &g_pre,
        }
        g_x
    }
}

/// The four residual-stage outputs, exposed for skip connections.
#[derive(Debug, Clone)]
pub struct EncoderOut<T> {
    /// Stage outputs in forward order (stage 1 at full pooled resolution,
    /// stage 4 the coarsest).
    pub stages: [Array4<T>; 4],
}

pub struct EncoderTrace<T> {
    stem: StemTrace<T>,
    blocks: Vec<Vec<ResidualBlockTrace<T>>>,
}

/// Fully convolutional feature extractor.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub stem: Stem<T>,
    pub stages: Vec<Vec<ResidualBlock<T>>>,
}

impl<T: Elem> Encoder<T> {
    pub(super) fn new(dims: &EffectiveDims) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut in_c = dims.stem;
        for (si, (&out_c, &count)) in dims.stages.iter().zip(dims.block_counts.iter()).enumerate() {
            let mut blocks = Vec::with_capacity(count);
            for bi in 0..count {
                // stages 2-4 downsample in their first block
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(in_c, out_c, stride));
                in_c = out_c;
            }
            stages.push(blocks);
        }
        Self { stem: Stem::new(dims.stem), stages }
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (EncoderOut<T>, EncoderTrace<T>) {
        self.forward_full(x, false)
    }

    /// Differentiable forward with batch norm frozen on its running
    /// statistics (inference semantics).
    pub fn forward_frozen(&mut self, x: &Array4<T>) -> (EncoderOut<T>, EncoderTrace<T>) {
        self.forward_full(x, true)
    }

    fn forward_full(&mut self, x: &Array4<T>, frozen: bool) -> (EncoderOut<T>, EncoderTrace<T>) {
        let (mut cur, stem_trace) = self.stem.forward_full(x, frozen);
        let mut outs: Vec<Array4<T>> = Vec::with_capacity(4);
        let mut traces = Vec::with_capacity(4);
        for stage in &mut self.stages {
            let mut stage_traces = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let (y, t) = block.forward_full(&cur, frozen);
                cur = y;
                stage_traces.push(t);
            }
            outs.push(cur.clone());
            traces.push(stage_traces);
        }
        let stages: [Array4<T>; 4] = outs.try_into().expect("four stages");
        (
            EncoderOut { stages },
            EncoderTrace { stem: stem_trace, blocks: traces },
        )
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> EncoderOut<T> {
        let mut cur = self.stem.forward_eval(x);
        let mut outs: Vec<Array4<T>> = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage.iter() {
                cur = block.forward_eval(&cur);
            }
            outs.push(cur.clone());
        }
        EncoderOut { stages: outs.try_into().expect("four stages") }
    }

    /// Backpropagates the per-stage output gradients (main path plus skip
    /// contributions) and returns the gradient at the network input.
    pub fn backward(&mut self, trace: &EncoderTrace<T>, stage_grads: [Array4<T>; 4]) -> Array4<T> {
        let [g1, g2, g3, g4] = stage_grads;
        let mut pending = [Some(g1), Some(g2), Some(g3), Some(g4)];
        let mut grad: Option<Array4<T>> = None;
        for si in (0..4).rev() {
            let mut g = match (grad.take(), pending[si].take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!(),
            };
            for (block, t) in self.stages[si]
                .iter_mut()
                .rev()
                .zip(trace.blocks[si].iter().rev())
            {
                g = block.backward(t, &g);
            }
            grad = Some(g);
        }
        self.stem.backward(&trace.stem, &grad.unwrap())
    }
}

impl<T: Elem> HasEntries<T> for Encoder<T> {
    fn visit_entries(&self, f: &mut dyn FnMut(EntryRef<'_, T>)) {
        self.stem.conv.yield_entries("encoder.stem.conv", f);
        self.stem.bn.yield_entries("encoder.stem.bn", f);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let p = format!("encoder.resblock{}.{}", si + 1, bi);
                block.conv1.yield_entries(&format!("{p}.conv1"), f);
                block.bn1.yield_entries(&format!("{p}.bn1"), f);
                block.conv2.yield_entries(&format!("{p}.conv2"), f);
                block.bn2.yield_entries(&format!("{p}.bn2"), f);
                if let Some((conv, bn)) = &block.downsample {
                    conv.yield_entries(&format!("{p}.downsample.conv"), f);
                    bn.yield_entries(&format!("{p}.downsample.bn"), f);
                }
            }
        }
    }

    fn visit_entries_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, T>)) {
        self.stem.conv.yield_entries_mut("encoder.stem.conv", f);
        self.stem.bn.yield_entries_mut("encoder.stem.bn", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("encoder.resblock{}.{}", si + 1, bi);
                block.conv1.yield_entries_mut(&format!("{p}.conv1"), f);
                block.bn1.yield_entries_mut(&format!("{p}.bn1"), f);
                block.conv2.yield_entries_mut(&format!("{p}.conv2"), f);
                block.bn2.yield_entries_mut(&format!("{p}.bn2"), f);
                if let Some((conv, bn)) = &mut block.downsample {
                    conv.yield_entries_mut(&format!("{p}.downsample.conv"), f);
                    bn.yield_entries_mut(&format!("{p}.downsample.bn"), f);
                }
            }
        }
    }
}

/// One decoder unit: optional zero-insertion upsampling, convolution,
/// ReLU, batch norm (the Conv-ReLU-BatchNorm ordering).
#[derive(Debug, Clone)]
pub struct UpConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub upsamples: bool,
}

pub struct UpConvTrace<T> {
    conv_in: Array4<T>,
    relu_y: Array4<T>,
    bn: BatchNormCache<T>,
}

impl<T: Elem> UpConvBlock<T> {
    fn upconv(out_c: usize, in_c: usize) -> Self {
        Self {
            conv: Conv2d::new(out_c, in_c, 4, 1, 2, true),
            bn: BatchNorm::new(out_c),
            upsamples: true,
        }
    }

    fn final_conv(out_c: usize, in_c: usize) -> Self {
        Self {
            conv: Conv2d::new(out_c, in_c, 3, 1, 1, true),
            bn: BatchNorm::new(out_c),
            upsamples: false,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, UpConvTrace<T>) {
        self.forward_full(x, false)
    }

    fn forward_full(&mut self, x: &Array4<T>, frozen: bool) -> (Array4<T>, UpConvTrace<T>) {
        let conv_in = if self.upsamples { zero_insert_2x(x) } else { x.clone() };
        let c = self.conv.forward(&conv_in);
        let r = relu4(&c);
        let (y, bn) = if frozen {
            self.bn.forward_frozen(&r)
        } else {
            self.bn.forward_train(&r)
        };
        (y, UpConvTrace { conv_in, relu_y: r, bn })
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let conv_in = if self.upsamples { zero_insert_2x(x) } else { x.clone() };
        self.bn.forward_eval(&relu4(&self.conv.forward(&conv_in)))
    }

    pub fn backward(&mut self, trace: &UpConvTrace<T>, grad_out: &Array4<T>) -> Array4<T> {
        let g = self.bn.backward(&trace.bn, grad_out);
        let g = relu4_backward(&g, &trace.relu_y);
        let g = self.conv.backward(&trace.conv_in, &g);
        if self.upsamples {
            zero_insert_2x_backward(&g)
        } else {
            g
        }
    }
}

/// Up-convolution chain with skip aggregation.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub variant: NetworkVariant,
    pub up1: UpConvBlock<T>,
    pub up2: UpConvBlock<T>,
    pub up3: UpConvBlock<T>,
    pub final_block: UpConvBlock<T>,
    dec_channels: [usize; 3],
}

pub struct DecoderTrace<T> {
    up1: UpConvTrace<T>,
    up2: UpConvTrace<T>,
    up3: UpConvTrace<T>,
    final_block: UpConvTrace<T>,
}

impl<T: Elem> Decoder<T> {
    pub(super) fn new(dims: &EffectiveDims, variant: NetworkVariant) -> Self {
        let concat = matches!(variant, NetworkVariant::Concat);
        let [d1, d2, d3] = dims.decoder;
        let widen = |dec_c: usize, enc_c: usize| if concat { dec_c + enc_c } else { dec_c };
        Self {
            variant,
            up1: UpConvBlock::upconv(d1, dims.stages[3]),
            up2: UpConvBlock::upconv(d2, widen(d1, dims.stages[2])),
            up3: UpConvBlock::upconv(d3, widen(d2, dims.stages[1])),
            final_block: UpConvBlock::final_conv(dims.final_conv, widen(d3, dims.stages[0])),
            dec_channels: dims.decoder,
        }
    }

    pub fn forward_train(
        &mut self,
        enc: &EncoderOut<T>,
    ) -> Result<(Array4<T>, DecoderTrace<T>), ModelError> {
        self.forward_full(enc, false)
    }

    /// Differentiable forward with frozen batch-norm statistics.
    pub fn forward_frozen(
        &mut self,
        enc: &EncoderOut<T>,
    ) -> Result<(Array4<T>, DecoderTrace<T>), ModelError> {
        self.forward_full(enc, true)
    }

    fn forward_full(
        &mut self,
        enc: &EncoderOut<T>,
        frozen: bool,
    ) -> Result<(Array4<T>, DecoderTrace<T>), ModelError> {
        let [s1, s2, s3, s4] = &enc.stages;
        let (b1, t1) = self.up1.forward_full(s4, frozen);
        let a1 = aggregate_skip(&b1, s3, self.variant)?;
        let (b2, t2) = self.up2.forward_full(&a1, frozen);
        let a2 = aggregate_skip(&b2, s2, self.variant)?;
        let (b3, t3) = self.up3.forward_full(&a2, frozen);
        let a3 = aggregate_skip(&b3, s1, self.variant)?;
        let (y, tf) = self.final_block.forward_full(&a3, frozen);
        Ok((y, DecoderTrace { up1: t1, up2: t2, up3: t3, final_block: tf }))
    }

    pub fn forward_eval(&self, enc: &EncoderOut<T>) -> Result<Array4<T>, ModelError> {
        let [s1, s2, s3, s4] = &enc.stages;
        let a1 = aggregate_skip(&self.up1.forward_eval(s4), s3, self.variant)?;
        let a2 = aggregate_skip(&self.up2.forward_eval(&a1), s2, self.variant)?;
        let a3 = aggregate_skip(&self.up3.forward_eval(&a2), s1, self.variant)?;
        Ok(self.final_block.forward_eval(&a3))
    }

    /// Returns the gradients at the four encoder stage outputs.
    pub fn backward(&mut self, trace: &DecoderTrace<T>, grad_out: &Array4<T>) -> [Array4<T>; 4] {
        let g_a3 = self.final_block.backward(&trace.final_block, grad_out);
        let (g_b3, g_s1) = aggregate_skip_backward(&g_a3, self.dec_channels[2], self.variant);
        let g_a2 = self.up3.backward(&trace.up3, &g_b3);
        let (g_b2, g_s2) = aggregate_skip_backward(&g_a2, self.dec_channels[1], self.variant);
        let g_a1 = self.up2.backward(&trace.up2, &g_b2);
        let (g_b1, g_s3) = aggregate_skip_backward(&g_a1, self.dec_channels[0], self.variant);
        let g_s4 = self.up1.backward(&trace.up1, &g_b1);
        [g_s1, g_s2, g_s3, g_s4]
    }
}

impl<T: Elem> HasEntries<T> for Decoder<T> {
    fn visit_entries(&self, f: &mut dyn FnMut(EntryRef<'_, T>)) {
        for (name, block) in [
            ("decoder.upconv1", &self.up1),
            ("decoder.upconv2", &self.up2),
            ("decoder.upconv3", &self.up3),
            ("decoder.final", &self.final_block),
        ] {
            block.conv.yield_entries(&format!("{name}.conv"), f);
            block.bn.yield_entries(&format!("{name}.bn"), f);
        }
    }

    fn visit_entries_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, T>)) {
        for (name, block) in [
            ("decoder.upconv1", &mut self.up1),
            ("decoder.upconv2", &mut self.up2),
            ("decoder.upconv3", &mut self.up3),
            ("decoder.final", &mut self.final_block),
        ] {
            block.conv.yield_entries_mut(&format!("{name}.conv"), f);
            block.bn.yield_entries_mut(&format!("{name}.bn"), f);
        }
    }
}

/// Fully connected pose head: localization layer with batch norm and
/// dropout, then parallel orientation (4) and translation (3) outputs.
#[derive(Debug, Clone)]
pub struct Regressor<T> {
    pub fc: Linear<T>,
    pub bn: BatchNorm<T>,
    pub dropout: Dropout,
    pub head_q: Linear<T>,
    pub head_t: Linear<T>,
}

pub struct RegressorTrace<T> {
    flat: Array2<T>,
    bn: BatchNormCache<T>,
    mask: Array2<T>,
    dropped: Array2<T>,
    input_dim: (usize, usize, usize, usize),
}

impl<T: Elem> Regressor<T> {
    pub(super) fn new(dims: &EffectiveDims, in_features: usize) -> Self {
        Self {
            fc: Linear::new(dims.hidden, in_features),
            bn: BatchNorm::new(dims.hidden),
            dropout: Dropout { prob: dims.dropout_prob },
            head_q: Linear::new(4, dims.hidden),
            head_t: Linear::new(3, dims.hidden),
        }
    }

    fn flatten(x: &Array4<T>) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        x.view()
            .into_shape_with_order((n, c * h * w))
            .unwrap()
            .to_owned()
    }

    /// Batch norm over features, via a `[N, F, 1, 1]` view.
    fn bn_2d(&mut self, h: &Array2<T>, frozen: bool) -> (Array2<T>, BatchNormCache<T>) {
        let (n, feat) = h.dim();
        let h4 = h.view().into_shape_with_order((n, feat, 1, 1)).unwrap();
        let (y4, cache) = if frozen {
            self.bn.forward_frozen(&h4.to_owned())
        } else {
            self.bn.forward_train(&h4.to_owned())
        };
        (
            y4.into_shape_with_order((n, feat)).unwrap(),
            cache,
        )
    }

    pub fn forward_train(
        &mut self,
        x: &Array4<T>,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<T>, Array2<T>, RegressorTrace<T>) {
        self.forward_full(x, Some(rng), false)
    }

    /// Frozen-statistics differentiable forward; dropout inactive.
    pub fn forward_frozen(&mut self, x: &Array4<T>) -> (Array2<T>, Array2<T>, RegressorTrace<T>) {
        self.forward_full(x, None, true)
    }

    fn forward_full(
        &mut self,
        x: &Array4<T>,
        rng: Option<&mut ChaCha8Rng>,
        frozen: bool,
    ) -> (Array2<T>, Array2<T>, RegressorTrace<T>) {
        let input_dim = x.dim();
        let flat = Self::flatten(x);
        let h = self.fc.forward(&flat);
        let (hb, bn_cache) = self.bn_2d(&h, frozen);
        let (hd, mask) = match rng {
            Some(rng) => self.dropout.forward_train(&hb, rng),
            None => (hb.clone(), Array2::ones(hb.dim())),
        };
        let q = self.head_q.forward(&hd);
        let t = self.head_t.forward(&hd);
        (
            q,
            t,
            RegressorTrace { flat, bn: bn_cache, mask, dropped: hd, input_dim },
        )
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> (Array2<T>, Array2<T>) {
        let n = x.dim().0;
        let feat = self.bn.channels();
        let flat = Self::flatten(x);
        let hid = self.fc.forward(&flat);
        let h4 = hid.into_shape_with_order((n, feat, 1, 1)).unwrap();
        let hb = self
            .bn
            .forward_eval(&h4)
            .into_shape_with_order((n, feat))
            .unwrap();
        (self.head_q.forward(&hb), self.head_t.forward(&hb))
    }

    pub fn backward(
        &mut self,
        trace: &RegressorTrace<T>,
        grad_q: &Array2<T>,
        grad_t: &Array2<T>,
    ) -> Array4<T> {
        let mut g_hd = self.head_q.backward(&trace.dropped, grad_q);
        g_hd += &self.head_t.backward(&trace.dropped, grad_t);
        let g_hb = self.dropout.backward(&g_hd, &trace.mask);
        let (n, feat) = g_hb.dim();
        let g4 = g_hb.into_shape_with_order((n, feat, 1, 1)).unwrap();
        let g_h = self
            .bn
            .backward(&trace.bn, &g4)
            .into_shape_with_order((n, feat))
            .unwrap();
        let g_flat = self.fc.backward(&trace.flat, &g_h);
        g_flat.into_shape_with_order(trace.input_dim).unwrap()
    }
}

impl<T: Elem> HasEntries<T> for Regressor<T> {
    fn visit_entries(&self, f: &mut dyn FnMut(EntryRef<'_, T>)) {
        self.fc.yield_entries("regressor.fc", f);
        self.bn.yield_entries("regressor.bn", f);
        self.head_q.yield_entries("regressor.head_q", f);
        self.head_t.yield_entries("regressor.head_t", f);
    }

    fn visit_entries_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, T>)) {
        self.fc.yield_entries_mut("regressor.fc", f);
        self.bn.yield_entries_mut("regressor.bn", f);
        self.head_q.yield_entries_mut("regressor.head_q", f);
        self.head_t.yield_entries_mut("regressor.head_t", f);
    }
}

