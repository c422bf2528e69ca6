//! Model-level integration tests: shape conformance, initialization,
//! checkpoint I/O, parameter counting, and a straight-line
//! reimplementation oracle for the forward pass.

use std::collections::HashMap;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hgpose::model::{
    aggregate_skip, build_encoder, load_checkpoint, save_checkpoint, HasEntries, Model,
    ModelConfig, ModelError, NetworkVariant, ParameterStore, TensorData,
};
use hgpose::Elem;

fn tiny_config(variant: NetworkVariant, input: usize) -> ModelConfig {
    ModelConfig {
        variant,
        input_hw: (input, input),
        width_multiplier: 0.125,
        dropout_prob: 0.0,
        ..ModelConfig::default()
    }
}

fn random_input<T: Elem>(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<T> {
    Array4::from_shape_simple_fn(dim, || T::from_f64(rng.gen_range(-1.0..1.0)))
}

#[test]
fn encoder_stage_shapes_preserve_batch_and_stride_arithmetic() {
    // quarter width keeps this fast; spatial sizes are width-independent
    let cfg = ModelConfig {
        width_multiplier: 0.25,
        ..ModelConfig::default()
    };
    let mut encoder = build_encoder::<f32>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input::<f32>(&mut rng, (2, 3, 224, 224));
    let (out, _) = encoder.forward_train(&x);
    assert_eq!(out.stages[0].dim(), (2, 16, 56, 56));
    assert_eq!(out.stages[1].dim(), (2, 32, 28, 28));
    assert_eq!(out.stages[2].dim(), (2, 64, 14, 14));
    assert_eq!(out.stages[3].dim(), (2, 128, 7, 7));

    // 256x256 input: final encoder map is input/32
    let cfg = ModelConfig {
        width_multiplier: 0.25,
        input_hw: (256, 256),
        ..ModelConfig::default()
    };
    let encoder = build_encoder::<f32>(&cfg).unwrap();
    let x = random_input::<f32>(&mut rng, (1, 3, 256, 256));
    let out = encoder.forward_eval(&x);
    assert_eq!(out.stages[3].dim(), (1, 128, 8, 8));
}

#[test]
fn full_forward_shapes_tiny_both_variants() {
    for variant in [NetworkVariant::Sum, NetworkVariant::Concat] {
        let cfg = tiny_config(variant, 64);
        let plan = cfg.shape_plan().unwrap();
        let mut model = Model::<f32>::new(cfg).unwrap();
        model.init_parameters(None, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input::<f32>(&mut rng, (5, 3, 64, 64));
        let out = model.forward_eval(&x).unwrap();
        assert_eq!(out.q_raw.dim(), (5, 4));
        assert_eq!(out.t.dim(), (5, 3));
        assert_eq!(plan.heads, (4, 3));
    }
}

#[test]
fn zero_parameters_predict_zero_pose() {
    let mut model = Model::<f32>::new(tiny_config(NetworkVariant::Sum, 32)).unwrap();
    model.init_zero();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_input::<f32>(&mut rng, (2, 3, 32, 32));
    let out = model.forward_eval(&x).unwrap();
    assert!(out.q_raw.iter().all(|v| *v == 0.0));
    assert!(out.t.iter().all(|v| *v == 0.0));
}

#[test]
fn eval_forward_is_deterministic_and_finite() {
    for variant in [NetworkVariant::Sum, NetworkVariant::Concat] {
        let mut model = Model::<f32>::new(tiny_config(variant, 32)).unwrap();
        model.init_parameters(None, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input::<f32>(&mut rng, (3, 3, 32, 32));
        let a = model.forward_eval(&x).unwrap();
        let b = model.forward_eval(&x).unwrap();
        assert_eq!(a.q_raw, b.q_raw);
        assert_eq!(a.t, b.t);
        assert!(a.q_raw.iter().chain(a.t.iter()).all(|v| v.is_finite()));
    }
}

#[test]
fn train_forward_and_gradients_are_finite_for_wide_inputs() {
    let mut model = Model::<f64>::new(tiny_config(NetworkVariant::Concat, 32)).unwrap();
    model.init_parameters(None, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Array4::from_shape_simple_fn((2, 3, 32, 32), || rng.gen_range(-3.0..3.0));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
    let (out, trace) = model.forward_train(&x, &mut drop_rng).unwrap();
    assert!(out.q_raw.iter().chain(out.t.iter()).all(|v| v.is_finite()));

    let grad_q = Array2::from_elem((2, 4), 0.3);
    let grad_t = Array2::from_elem((2, 3), -0.2);
    model.zero_grads();
    let gx = model.backward(&trace, &grad_q, &grad_t);
    assert!(gx.iter().all(|v| v.is_finite()));
    model.visit_entries_mut(&mut |e| {
        if let Some(g) = e.grad {
            assert!(g.iter().all(|v| v.is_finite()), "{} has non-finite grad", e.name);
        }
    });
}

#[test]
fn init_is_deterministic_and_pretrained_import_is_bit_exact() {
    let cfg = tiny_config(NetworkVariant::Sum, 32);
    let mut a = Model::<f32>::new(cfg.clone()).unwrap();
    let mut b = Model::<f32>::new(cfg.clone()).unwrap();
    a.init_parameters(None, 77).unwrap();
    b.init_parameters(None, 77).unwrap();
    assert_eq!(a.state_dict(), b.state_dict());

    let mut c = Model::<f32>::new(cfg.clone()).unwrap();
    c.init_parameters(None, 78).unwrap();
    assert_ne!(a.state_dict(), c.state_dict());

    // encoder-only import: matching names become bit-equal to the source
    let mut donor_store = ParameterStore::new();
    for (name, tensor) in a.state_dict().iter() {
        if name.starts_with("encoder.") {
            donor_store.insert(name.to_string(), tensor.clone()).unwrap();
        }
    }
    let mut d = Model::<f32>::new(cfg.clone()).unwrap();
    d.init_parameters(Some(&donor_store), 99).unwrap();
    let d_state = d.state_dict();
    for (name, tensor) in donor_store.iter() {
        assert_eq!(d_state.get(name).unwrap(), tensor, "{name} not imported");
    }
    // non-encoder weights follow seed 99, not the donor
    assert_ne!(
        d_state.get("regressor.fc.weight"),
        a.state_dict().get("regressor.fc.weight")
    );

    // shape mismatch is rejected
    let mut bad = ParameterStore::new();
    bad.insert(
        "encoder.stem.conv.weight".into(),
        TensorData { shape: vec![1, 3, 7, 7], data: vec![0.0; 147] },
    )
    .unwrap();
    let mut e = Model::<f32>::new(cfg).unwrap();
    assert!(matches!(
        e.init_parameters(Some(&bad), 1),
        Err(ModelError::ShapeMismatch { .. })
    ));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hgp");
    let cfg = tiny_config(NetworkVariant::Concat, 32);
    let mut model = Model::<f32>::new(cfg.clone()).unwrap();
    model.init_parameters(None, 123).unwrap();
    save_checkpoint(&model, &path).unwrap();

    let (loaded_cfg, store) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(store, model.state_dict());

    let mut reloaded = Model::<f32>::new(loaded_cfg).unwrap();
    reloaded.load_state_dict(&store).unwrap();
    assert_eq!(reloaded.state_dict(), model.state_dict());

    // and the rebuilt model computes identically
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_input::<f32>(&mut rng, (1, 3, 32, 32));
    assert_eq!(
        model.forward_eval(&x).unwrap().q_raw,
        reloaded.forward_eval(&x).unwrap().q_raw
    );
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hgp");
    let mut model = Model::<f32>::new(tiny_config(NetworkVariant::Sum, 32)).unwrap();
    model.init_parameters(None, 5).unwrap();
    save_checkpoint(&model, &path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let truncated = &bytes[..bytes.len() - 100];
    let tpath = dir.path().join("truncated.hgp");
    std::fs::write(&tpath, truncated).unwrap();
    assert!(matches!(
        load_checkpoint(&tpath),
        Err(ModelError::CorruptCheckpoint { .. })
    ));

    // header length pointing past the end of file
    let mut mangled = bytes.clone();
    mangled[0..8].copy_from_slice(&u64::MAX.to_le_bytes());
    let mpath = dir.path().join("mangled.hgp");
    std::fs::write(&mpath, &mangled).unwrap();
    assert!(matches!(
        load_checkpoint(&mpath),
        Err(ModelError::CorruptCheckpoint { .. })
    ));
}

/// A minimal independent writer following the container description:
/// 8-byte LE header length, JSON header, then contiguous LE f32 payload.
#[test]
fn independently_written_checkpoint_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("external.hgp");

    let tensor_a: Vec<f32> = vec![1.0, -2.5, 3.25];
    let tensor_b: Vec<f32> = vec![0.5; 4];
    let header = format!(
        concat!(
            "{{\"format_version\":1,",
            "\"config\":{{\"variant\":\"sum\",\"input_hw\":[32,32],",
            "\"encoder_channels\":[64,64,128,256,512],",
            "\"encoder_block_counts\":[3,4,6,3],",
            "\"decoder_channels\":[256,128,64],",
            "\"final_conv_channels\":32,\"regressor_hidden\":2048,",
            "\"dropout_prob\":0.5,\"width_multiplier\":0.125}},",
            "\"tensors\":[",
            "{{\"name\":\"a\",\"dtype\":\"f32\",\"shape\":[3],\"byte_offset\":0,\"byte_length\":12}},",
            "{{\"name\":\"b\",\"dtype\":\"f32\",\"shape\":[2,2],\"byte_offset\":12,\"byte_length\":16}}",
            "]}}"
        ),
    );
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in tensor_a.iter().chain(tensor_b.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, &bytes).unwrap();

    let (cfg, store) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg.width_multiplier, 0.125);
    assert_eq!(cfg.input_hw, (32, 32));
    assert_eq!(store.len(), 2);
    assert_eq!(store.get("a").unwrap().data, tensor_a);
    assert_eq!(store.get("b").unwrap().shape, vec![2, 2]);
}

#[test]
fn encoder_parameter_count_matches_arithmetic_oracle() {
    // per-layer arithmetic for the default backbone, classification head removed
    let stem = 64 * 3 * 7 * 7 + 2 * 64;
    let block = |inc: usize, outc: usize, downsample: bool| {
        let mut p = outc * inc * 9 + 2 * outc; // conv1 + bn1
        p += outc * outc * 9 + 2 * outc; // conv2 + bn2
        if downsample {
            p += outc * inc + 2 * outc; // 1x1 projection + bn
        }
        p
    };
    let stage = |inc: usize, outc: usize, blocks: usize, first_downsamples: bool| {
        let mut p = block(inc, outc, first_downsamples);
        for _ in 1..blocks {
            p += block(outc, outc, false);
        }
        p
    };
    let expected = stem
        + stage(64, 64, 3, false)
        + stage(64, 128, 4, true)
        + stage(128, 256, 6, true)
        + stage(256, 512, 3, true);
    assert_eq!(expected, 21_284_672);

    let encoder = build_encoder::<f32>(&ModelConfig::default()).unwrap();
    let counted = hgpose::model::count_parameters(&encoder);
    assert_eq!(counted, expected);
    assert!((counted as f64 - 21.28e6).abs() < 0.1e6);
}

#[test]
fn doubling_final_conv_channels_doubles_localization_weights() {
    let weight_count = |cfg: &ModelConfig| {
        let mut model = Model::<f32>::new(cfg.clone()).unwrap();
        let mut count = 0usize;
        model.visit_entries_mut(&mut |e| {
            if e.name == "regressor.fc.weight" {
                count = e.data.len();
            }
        });
        count
    };
    let base = tiny_config(NetworkVariant::Sum, 32);
    let mut doubled = base.clone();
    doubled.final_conv_channels *= 2;
    assert_eq!(weight_count(&doubled), 2 * weight_count(&base));
}

#[test]
fn sum_variant_with_zero_skips_equals_chained_decoder() {
    let cfg = tiny_config(NetworkVariant::Sum, 32);
    let mut model = Model::<f64>::new(cfg).unwrap();
    model.init_parameters(None, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Array4::from_shape_simple_fn((1, 3, 32, 32), || rng.gen_range(-1.0..1.0));

    let mut enc_out = model.encoder.forward_eval(&x);
    for stage in enc_out.stages.iter_mut().take(3) {
        stage.fill(0.0);
    }
    let with_zero_skips = model.decoder.forward_eval(&enc_out).unwrap();

    // chaining the blocks without any aggregation must agree exactly
    let d = &model.decoder;
    let b1 = d.up1.forward_eval(&enc_out.stages[3]);
    let b2 = d.up2.forward_eval(&b1);
    let b3 = d.up3.forward_eval(&b2);
    let no_skip = d.final_block.forward_eval(&b3);
    assert_eq!(with_zero_skips, no_skip);
}

// ---------------------------------------------------------------------
// Straight-line reimplementation oracle
// ---------------------------------------------------------------------

type Params = HashMap<String, (Vec<usize>, Vec<f64>)>;

fn dump_params(model: &Model<f64>) -> Params {
    let mut out = HashMap::new();
    model.visit_entries(&mut |e| {
        out.insert(e.name.clone(), (e.shape.clone(), e.data.to_vec()));
    });
    out
}

fn naive_conv(x: &Array4<f64>, w: &(Vec<usize>, Vec<f64>), b: Option<&Vec<f64>>, stride: usize, pad: usize) -> Array4<f64> {
    let (n, in_c, h, wd) = x.dim();
    let (oc, ic, kh, kw) = (w.0[0], w.0[1], w.0[2], w.0[3]);
    assert_eq!(in_c, ic);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Array4::<f64>::zeros((n, oc, oh, ow));
    for ni in 0..n {
        for o in 0..oc {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..ic {
                        for dr in 0..kh {
                            for dc in 0..kw {
                                let ir = (r * stride + dr) as isize - pad as isize;
                                let icol = (c * stride + dc) as isize - pad as isize;
                                if ir < 0 || ir >= h as isize || icol < 0 || icol >= wd as isize {
                                    continue;
                                }
                                acc += x[[ni, i, ir as usize, icol as usize]]
                                    * w.1[((o * ic + i) * kh + dr) * kw + dc];
                            }
                        }
                    }
                    y[[ni, o, r, c]] = acc;
                }
            }
        }
    }
    y
}

fn naive_bn_eval(x: &Array4<f64>, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Array4<f64> {
    let mut y = x.clone();
    let (n, c, h, w) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let xh = (x[[ni, ci, r, col]] - mean[ci]) / (var[ci] + 1e-5).sqrt();
                    y[[ni, ci, r, col]] = gamma[ci] * xh + beta[ci];
                }
            }
        }
    }
    y
}

fn naive_relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

fn naive_maxpool(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let ir = (r * 2 + dr) as isize - 1;
                            let ic = (col * 2 + dc) as isize - 1;
                            if ir < 0 || ir >= h as isize || ic < 0 || ic >= w as isize {
                                continue;
                            }
                            best = best.max(x[[ni, ci, ir as usize, ic as usize]]);
                        }
                    }
                    y[[ni, ci, r, col]] = best;
                }
            }
        }
    }
    y
}

fn naive_zero_insert(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, 2 * h - 1, 2 * w - 1));
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    y[[ni, ci, 2 * r, 2 * col]] = x[[ni, ci, r, col]];
                }
            }
        }
    }
    y
}

fn p<'a>(params: &'a Params, name: &str) -> &'a (Vec<usize>, Vec<f64>) {
    params.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn naive_bn_block(params: &Params, prefix: &str, x: &Array4<f64>) -> Array4<f64> {
    naive_bn_eval(
        x,
        &p(params, &format!("{prefix}.weight")).1,
        &p(params, &format!("{prefix}.bias")).1,
        &p(params, &format!("{prefix}.running_mean")).1,
        &p(params, &format!("{prefix}.running_var")).1,
    )
}

fn naive_resblock(params: &Params, prefix: &str, x: &Array4<f64>, stride: usize, project: bool) -> Array4<f64> {
    let c1 = naive_conv(x, p(params, &format!("{prefix}.conv1.weight")), None, stride, 1);
    let b1 = naive_bn_block(params, &format!("{prefix}.bn1"), &c1);
    let r1 = naive_relu(&b1);
    let c2 = naive_conv(&r1, p(params, &format!("{prefix}.conv2.weight")), None, 1, 1);
    let b2 = naive_bn_block(params, &format!("{prefix}.bn2"), &c2);
    let shortcut = if project {
        let dc = naive_conv(
            x,
            p(params, &format!("{prefix}.downsample.conv.weight")),
            None,
            stride,
            0,
        );
        naive_bn_block(params, &format!("{prefix}.downsample.bn"), &dc)
    } else {
        x.clone()
    };
    naive_relu(&(&b2 + &shortcut))
}

fn naive_upconv(params: &Params, prefix: &str, x: &Array4<f64>, upsample: bool) -> Array4<f64> {
    let conv_in = if upsample { naive_zero_insert(x) } else { x.clone() };
    let (k, pad) = if upsample { (4, 2) } else { (3, 1) };
    let w = p(params, &format!("{prefix}.conv.weight"));
    assert_eq!(w.0[2], k);
    let c = naive_conv(
        &conv_in,
        w,
        Some(&p(params, &format!("{prefix}.conv.bias")).1),
        1,
        pad,
    );
    naive_bn_block(params, &format!("{prefix}.bn"), &naive_relu(&c))
}

fn naive_aggregate(dec: &Array4<f64>, enc: &Array4<f64>, variant: NetworkVariant) -> Array4<f64> {
    match variant {
        NetworkVariant::Sum => dec + enc,
        NetworkVariant::Concat => {
            ndarray::concatenate(ndarray::Axis(1), &[dec.view(), enc.view()]).unwrap()
        }
    }
}

fn naive_linear(params: &Params, prefix: &str, x: &Array2<f64>) -> Array2<f64> {
    let w = p(params, &format!("{prefix}.weight"));
    let b = &p(params, &format!("{prefix}.bias")).1;
    let (out_f, in_f) = (w.0[0], w.0[1]);
    let n = x.nrows();
    let mut y = Array2::<f64>::zeros((n, out_f));
    for ni in 0..n {
        for o in 0..out_f {
            let mut acc = b[o];
            for i in 0..in_f {
                acc += x[[ni, i]] * w.1[o * in_f + i];
            }
            y[[ni, o]] = acc;
        }
    }
    y
}

/// End-to-end duplicate of the eval-mode graph with plain loops, driven
/// only by the parameter dump and the block wiring.
fn naive_forward(params: &Params, variant: NetworkVariant, x: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
    // stem
    let c = naive_conv(x, p(params, "encoder.stem.conv.weight"), None, 2, 3);
    let b = naive_bn_block(params, "encoder.stem.bn", &c);
    let mut cur = naive_maxpool(&naive_relu(&b));

    // stages [3, 4, 6, 3]
    let mut stage_outputs = Vec::new();
    for (si, blocks) in [3usize, 4, 6, 3].iter().enumerate() {
        for bi in 0..*blocks {
            let project = si > 0 && bi == 0;
            let stride = if project { 2 } else { 1 };
            cur = naive_resblock(
                params,
                &format!("encoder.resblock{}.{}", si + 1, bi),
                &cur,
                stride,
                project,
            );
        }
        stage_outputs.push(cur.clone());
    }

    // decoder with skips: stage4 -> up1, aggregate stage3/2/1
    let b1 = naive_upconv(params, "decoder.upconv1", &stage_outputs[3], true);
    let a1 = naive_aggregate(&b1, &stage_outputs[2], variant);
    let b2 = naive_upconv(params, "decoder.upconv2", &a1, true);
    let a2 = naive_aggregate(&b2, &stage_outputs[1], variant);
    let b3 = naive_upconv(params, "decoder.upconv3", &a2, true);
    let a3 = naive_aggregate(&b3, &stage_outputs[0], variant);
    let dec = naive_upconv(params, "decoder.final", &a3, false);

    // regressor: flatten -> fc -> bn -> heads (dropout inactive in eval)
    let (n, cch, h, w) = dec.dim();
    let mut flat = Array2::<f64>::zeros((n, cch * h * w));
    for ni in 0..n {
        let mut i = 0;
        for ci in 0..cch {
            for r in 0..h {
                for col in 0..w {
                    flat[[ni, i]] = dec[[ni, ci, r, col]];
                    i += 1;
                }
            }
        }
    }
    let hid = naive_linear(params, "regressor.fc", &flat);
    let hid4 = hid.clone().into_shape_with_order((n, hid.ncols(), 1, 1)).unwrap();
    let hb4 = naive_bn_block(params, "regressor.bn", &hid4);
    let hb = hb4.into_shape_with_order((n, hid.ncols())).unwrap();
    let q = naive_linear(params, "regressor.head_q", &hb);
    let t = naive_linear(params, "regressor.head_t", &hb);
    (q, t)
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    for variant in [NetworkVariant::Sum, NetworkVariant::Concat] {
        let cfg = ModelConfig {
            variant,
            input_hw: (64, 64),
            width_multiplier: 0.125,
            dropout_prob: 0.5, // inactive in eval mode
            ..ModelConfig::default()
        };
        let mut model = Model::<f64>::new(cfg).unwrap();
        model.init_parameters(None, 33).unwrap();
        // non-trivial running stats so eval-mode batch norm is exercised
        let mut warm = ChaCha8Rng::seed_from_u64(34);
        let warm_x = Array4::from_shape_simple_fn((2, 3, 64, 64), || warm.gen_range(-1.0..1.0));
        let mut drop_rng = ChaCha8Rng::seed_from_u64(35);
        model.forward_train(&warm_x, &mut drop_rng).unwrap();

        let params = dump_params(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let x = Array4::from_shape_simple_fn((2, 3, 64, 64), || rng.gen_range(-1.0..1.0));

        let fast = model.forward_eval(&x).unwrap();
        let (naive_q, naive_t) = naive_forward(&params, variant, &x);

        for (a, b) in fast.q_raw.iter().zip(naive_q.iter()) {
            assert!((a - b).abs() < 1e-5, "{variant:?} q: {a} vs {b}");
        }
        for (a, b) in fast.t.iter().zip(naive_t.iter()) {
            assert!((a - b).abs() < 1e-5, "{variant:?} t: {a} vs {b}");
        }
    }
}

#[test]
fn aggregate_skip_rejects_mismatched_batch() {
    let a = Array4::<f32>::zeros((2, 4, 8, 8));
    let b = Array4::<f32>::zeros((1, 4, 8, 8));
    assert!(matches!(
        aggregate_skip(&a, &b, NetworkVariant::Concat),
        Err(ModelError::ShapeMismatch { .. })
    ));
}
