//! The gradient-check and oracle-equivalence suites as plain functions, so
//! both the per-suite test binaries and the acceptance run can execute them.
//!
//! Each function panics with a diagnostic on failure. Inputs for kinked or
//! singular ops (relu, div, sqrt, maxpool) are sampled away from the
//! non-smooth set so the finite differences are valid.

use super::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rppg::models::{ModelConfig, PulseNet, VariantKind};
use rppg::nn::{ConvLstmCell, LstmCell};
use rppg::tensor::ops;
use rppg::tensor::tape::{deconv3d_raw, GradTape, TapeId};
use rppg::train::{mse_loss, neg_pearson_loss};
use rppg::Tensor;

const INSTANCES: usize = 20;
const MAX_COORDS: usize = 24;
const ORACLE_INSTANCES: usize = 50;

fn rand_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    let dims = r.gen_range(1..=3);
    (0..dims).map(|_| r.gen_range(1..=5)).collect()
}

/// Values with |x| in [lo,hi]: bounded away from zero for relu/div kinks.
fn rand_signed(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(lo..hi);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ── Gradient checks, one per differentiable op ────────────────────────

pub fn grad_relu() {
    let mut r = rng(101);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let x = rand_signed(&mut r, &shape, 0.1, 2.0);
        check_gradients("relu", &[x], &|t, ids| Ok(t.relu(ids[0])), MAX_COORDS, &mut r);
    }
}

pub fn grad_sigmoid() {
    let mut r = rng(102);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let x = rand_tensor(&mut r, &shape, -3.0, 3.0);
        check_gradients("sigmoid", &[x], &|t, ids| Ok(t.sigmoid(ids[0])), MAX_COORDS, &mut r);
    }
}

pub fn grad_tanh() {
    let mut r = rng(103);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let x = rand_tensor(&mut r, &shape, -3.0, 3.0);
        check_gradients("tanh", &[x], &|t, ids| Ok(t.tanh(ids[0])), MAX_COORDS, &mut r);
    }
}

pub fn grad_sqrt() {
    let mut r = rng(104);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let x = rand_tensor(&mut r, &shape, 0.25, 4.0);
        check_gradients("sqrt", &[x], &|t, ids| Ok(t.sqrt(ids[0])), MAX_COORDS, &mut r);
    }
}

pub fn grad_add_sub_mul() {
    let mut r = rng(105);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let a = rand_tensor(&mut r, &shape, -2.0, 2.0);
        let b = rand_tensor(&mut r, &shape, -2.0, 2.0);
        check_gradients("add", &[a.clone(), b.clone()], &|t, i| t.add(i[0], i[1]), MAX_COORDS, &mut r);
        check_gradients("sub", &[a.clone(), b.clone()], &|t, i| t.sub(i[0], i[1]), MAX_COORDS, &mut r);
        check_gradients("mul", &[a, b], &|t, i| t.mul(i[0], i[1]), MAX_COORDS, &mut r);
    }
}

pub fn grad_div() {
    let mut r = rng(106);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let a = rand_tensor(&mut r, &shape, -2.0, 2.0);
        let b = rand_signed(&mut r, &shape, 0.5, 2.0);
        check_gradients("div", &[a, b], &|t, i| t.div(i[0], i[1]), MAX_COORDS, &mut r);
    }
}

pub fn grad_scale() {
    let mut r = rng(107);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let x = rand_tensor(&mut r, &shape, -2.0, 2.0);
        let factor = r.gen_range(-3.0..3.0);
        check_gradients("scale", &[x], &move |t, i| Ok(t.scale(i[0], factor)), MAX_COORDS, &mut r);
    }
}

pub fn grad_matmul() {
    let mut r = rng(108);
    for _ in 0..INSTANCES {
        let (m, k, n) = (r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5));
        let a = rand_tensor(&mut r, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[k, n], -1.0, 1.0);
        check_gradients("matmul", &[a, b], &|t, i| t.matmul(i[0], i[1]), MAX_COORDS, &mut r);
    }
}

pub fn grad_conv3d_same_padded() {
    // the model's stride-1 case: 3x3x3 kernel, padding 1, with bias
    let mut r = rng(109);
    for _ in 0..INSTANCES {
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (t, h, w) = (r.gen_range(2..=4), r.gen_range(3..=5), r.gen_range(3..=5));
        let x = rand_tensor(&mut r, &[ci, t, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[co, ci, 3, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[co], -1.0, 1.0);
        check_gradients(
            "conv3d same",
            &[x, k, b],
            &|t, i| t.conv3d(i[0], i[1], Some(i[2]), (1, 1, 1), (1, 1, 1)),
            MAX_COORDS,
            &mut r,
        );
    }
}

pub fn grad_conv3d_strided() {
    let mut r = rng(110);
    for _ in 0..INSTANCES {
        let (ci, co) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let (t, h, w) = (r.gen_range(3..=5), r.gen_range(3..=5), r.gen_range(3..=5));
        let stride = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
        let pad = (r.gen_range(0..=1), r.gen_range(0..=1), r.gen_range(0..=1));
        let kdim = |n: usize, p: usize, rr: &mut ChaCha8Rng| rr.gen_range(1..=(n + 2 * p).min(3));
        let (kt, kh, kw) = (kdim(t, pad.0, &mut r), kdim(h, pad.1, &mut r), kdim(w, pad.2, &mut r));
        let x = rand_tensor(&mut r, &[ci, t, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[co, ci, kt, kh, kw], -1.0, 1.0);
        check_gradients(
            "conv3d strided",
            &[x, k],
            &move |t, i| t.conv3d(i[0], i[1], None, stride, pad),
            MAX_COORDS,
            &mut r,
        );
    }
}

pub fn grad_conv3d_spatial_only() {
    // the 2-D variant's kernels: kT = 1, so no temporal mixing
    let mut r = rng(111);
    for _ in 0..INSTANCES {
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (t, h, w) = (r.gen_range(1..=4), r.gen_range(3..=5), r.gen_range(3..=5));
        let x = rand_tensor(&mut r, &[ci, t, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[co, ci, 1, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[co], -1.0, 1.0);
        check_gradients(
            "conv3d kt=1",
            &[x, k, b],
            &|t, i| t.conv3d(i[0], i[1], Some(i[2]), (1, 1, 1), (0, 1, 1)),
            MAX_COORDS,
            &mut r,
        );
    }
}

pub fn grad_deconv3d() {
    let mut r = rng(112);
    for inst in 0..INSTANCES {
        // always include the decoder's exact geometry among the instances
        let (stride, pad, kt) = if inst % 2 == 0 {
            ((2usize, 1usize, 1usize), (1usize, 0usize, 0usize), 4usize)
        } else {
            ((r.gen_range(1..=2), 1, 1), (0, 0, 0), r.gen_range(1..=3))
        };
        let (ci, co) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let (t, h, w) = (r.gen_range(2..=4), r.gen_range(1..=3), r.gen_range(1..=3));
        let x = rand_tensor(&mut r, &[ci, t, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[ci, co, kt, 1, 1], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[co], -1.0, 1.0);
        check_gradients(
            "deconv3d",
            &[x, k, b],
            &move |t, i| t.deconv3d(i[0], i[1], Some(i[2]), stride, pad),
            MAX_COORDS,
            &mut r,
        );
    }
}

pub fn grad_maxpool3d() {
    let mut r = rng(113);
    for inst in 0..INSTANCES {
        let kernel = if inst % 2 == 0 { (1, 2, 2) } else { (2, 2, 2) };
        let c = r.gen_range(1..=3);
        let (t, h, w) = (2 * r.gen_range(1..=2), 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3));
        // distinct values so the argmax is stable under the FD step
        let x = rand_distinct_tensor(&mut r, &[c, t, h, w]);
        check_gradients(
            "maxpool3d",
            &[x],
            &move |t, i| t.maxpool3d(i[0], kernel, kernel),
            MAX_COORDS,
            &mut r,
        );
    }
}

pub fn grad_batchnorm() {
    let mut r = rng(114);
    for _ in 0..INSTANCES {
        // the model feeds batchnorm a [1,C,M] view of its [C,T,H,W] maps
        let c = r.gen_range(1..=3);
        let m = r.gen_range(2..=16);
        let x = rand_tensor(&mut r, &[1, c, m], -2.0, 2.0);
        let gamma = rand_signed(&mut r, &[c], 0.5, 1.5);
        let beta = rand_tensor(&mut r, &[c], -1.0, 1.0);
        check_gradients(
            "batchnorm",
            &[x, gamma, beta],
            &|t, i| Ok(t.batchnorm_train(i[0], i[1], i[2], 1e-5)?.0),
            MAX_COORDS,
            &mut r,
        );
    }
}

pub fn grad_spatial_avgpool() {
    let mut r = rng(115);
    for _ in 0..INSTANCES {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)];
        let x = rand_tensor(&mut r, &shape, -2.0, 2.0);
        check_gradients("spatial_avgpool", &[x], &|t, i| t.spatial_avgpool(i[0]), MAX_COORDS, &mut r);
    }
}

pub fn grad_sum_and_mean() {
    let mut r = rng(116);
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut r);
        let x = rand_tensor(&mut r, &shape, -2.0, 2.0);
        check_gradients("sum", &[x.clone()], &|t, i| Ok(t.sum(i[0])), MAX_COORDS, &mut r);
        check_gradients("mean", &[x], &|t, i| Ok(t.mean(i[0])), MAX_COORDS, &mut r);
    }
}

pub fn grad_reshape_transpose() {
    let mut r = rng(117);
    for _ in 0..INSTANCES {
        let (m, n) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let x = rand_tensor(&mut r, &[m, n], -2.0, 2.0);
        check_gradients(
            "reshape",
            &[x.clone()],
            &move |t, i| t.reshape(i[0], &[n, m]),
            MAX_COORDS,
            &mut r,
        );
        check_gradients("transpose2d", &[x], &|t, i| t.transpose2d(i[0]), MAX_COORDS, &mut r);
    }
}

pub fn grad_row_and_time_ops() {
    let mut r = rng(118);
    for _ in 0..INSTANCES {
        let (rows, cols) = (r.gen_range(2..=5), r.gen_range(1..=5));
        let x = rand_tensor(&mut r, &[rows, cols], -2.0, 2.0);
        let row = r.gen_range(0..rows);
        check_gradients("slice_row", &[x], &move |t, i| t.slice_row(i[0], row), MAX_COORDS, &mut r);

        let parts: Vec<Tensor<f64>> = (0..rows).map(|_| rand_tensor(&mut r, &[1, cols], -2.0, 2.0)).collect();
        check_gradients("stack_rows", &parts, &|t, i| t.stack_rows(i), MAX_COORDS, &mut r);

        let shape = [r.gen_range(1..=3), r.gen_range(2..=4), r.gen_range(1..=3), r.gen_range(1..=3)];
        let v = rand_tensor(&mut r, &shape, -2.0, 2.0);
        let tt = r.gen_range(0..shape[1]);
        check_gradients("time_slice", &[v], &move |t, i| t.time_slice(i[0], tt), MAX_COORDS, &mut r);

        let frame_shape = [shape[0], 1, shape[2], shape[3]];
        let frames: Vec<Tensor<f64>> = (0..shape[1]).map(|_| rand_tensor(&mut r, &frame_shape, -2.0, 2.0)).collect();
        check_gradients("stack_time", &frames, &|t, i| t.stack_time(i), MAX_COORDS, &mut r);

        let a = rand_tensor(&mut r, &[rows, cols], -2.0, 2.0);
        let cols2 = r.gen_range(1..=5);
        let b = rand_tensor(&mut r, &[rows, cols2], -2.0, 2.0);
        check_gradients("concat_cols", &[a, b], &|t, i| t.concat_cols(i[0], i[1]), MAX_COORDS, &mut r);
    }
}

pub fn grad_lstm_step() {
    let mut r = rng(119);
    for _ in 0..INSTANCES {
        let (nin, nh) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let mut leaves = Vec::new();
        for wi in 0..8 {
            let shape = if wi % 2 == 0 { [nin, nh] } else { [nh, nh] };
            leaves.push(rand_tensor(&mut r, &shape, -1.0, 1.0));
        }
        leaves.push(rand_tensor(&mut r, &[1, nin], -1.0, 1.0)); // x
        leaves.push(rand_tensor(&mut r, &[1, nh], -1.0, 1.0)); // h
        leaves.push(rand_tensor(&mut r, &[1, nh], -1.0, 1.0)); // c
        let build = |want_h: bool| {
            move |t: &mut GradTape<f64>, i: &[TapeId]| -> rppg::Result<TapeId> {
                let w: [TapeId; 8] = i[..8].try_into().unwrap();
                let (hn, cn) = LstmCell::step_t(t, &w, i[8], i[9], i[10])?;
                Ok(if want_h { hn } else { cn })
            }
        };
        check_gradients("lstm_step h", &leaves, &build(true), MAX_COORDS, &mut r);
        check_gradients("lstm_step c", &leaves, &build(false), MAX_COORDS, &mut r);
    }
}

pub fn grad_convlstm_step() {
    let mut r = rng(120);
    for _ in 0..INSTANCES {
        let (nin, nh, k) = (r.gen_range(1..=2), r.gen_range(1..=2), 3usize);
        let (sh, sw) = (r.gen_range(2..=3), r.gen_range(2..=3));
        let pad = (k - 1) / 2;
        let mut leaves = Vec::new();
        for wi in 0..8 {
            let cin = if wi % 2 == 0 { nin } else { nh };
            leaves.push(rand_tensor(&mut r, &[nh, cin, 1, k, k], -0.5, 0.5));
        }
        leaves.push(rand_tensor(&mut r, &[nin, 1, sh, sw], -1.0, 1.0)); // x
        leaves.push(rand_tensor(&mut r, &[nh, 1, sh, sw], -1.0, 1.0)); // h
        leaves.push(rand_tensor(&mut r, &[nh, 1, sh, sw], -1.0, 1.0)); // c
        let build = |want_h: bool| {
            move |t: &mut GradTape<f64>, i: &[TapeId]| -> rppg::Result<TapeId> {
                let w: [TapeId; 8] = i[..8].try_into().unwrap();
                let (hn, cn) = ConvLstmCell::step_t(t, &w, pad, i[8], i[9], i[10])?;
                Ok(if want_h { hn } else { cn })
            }
        };
        check_gradients("convlstm_step h", &leaves, &build(true), MAX_COORDS, &mut r);
        check_gradients("convlstm_step c", &leaves, &build(false), MAX_COORDS, &mut r);
    }
}

pub fn grad_neg_pearson_loss() {
    let mut r = rng(121);
    for _ in 0..INSTANCES {
        let n = r.gen_range(4..=10);
        let pred = rand_tensor(&mut r, &[n], -1.0, 1.0);
        let target = rand_tensor(&mut r, &[n], -1.0, 1.0);
        check_gradients(
            "neg_pearson_loss",
            &[pred, target],
            &|t, i| neg_pearson_loss(t, i[0], i[1]),
            MAX_COORDS,
            &mut r,
        );
    }
}

pub fn grad_mse_loss() {
    let mut r = rng(122);
    for _ in 0..INSTANCES {
        let n = r.gen_range(2..=10);
        let pred = rand_tensor(&mut r, &[n], -1.0, 1.0);
        let target = rand_tensor(&mut r, &[n], -1.0, 1.0);
        check_gradients(
            "mse_loss",
            &[pred, target],
            &|t, i| mse_loss(t, i[0], i[1]),
            MAX_COORDS,
            &mut r,
        );
    }
}

// ── Full models, end to end ───────────────────────────────────────────
//
// Composite check at a slightly looser tolerance: with thousands of relu
// and maxpool sites, a few pre-activations inevitably sit within the FD
// step of a kink.

const MODEL_GRAD_TOL: f64 = 1e-3;

fn model_fd_loss(model: &PulseNet<f64>, frames: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let mut tape = GradTape::<f64>::new();
    let (out, _, _) = model.forward_train(&mut tape, frames).unwrap();
    let tgt = tape.constant(target.clone());
    let loss = mse_loss(&mut tape, out, tgt).unwrap();
    tape.value(loss).item()
}

pub fn grad_model(kind: VariantKind, seed: u64) {
    let mut r = rng(seed);
    let model = PulseNet::<f32>::new(ModelConfig::with_width(kind, 2), seed).cast_to::<f64>();
    let frames = rand_tensor(&mut r, &[3, 4, 32, 32], 0.0, 1.0);
    let target = rand_tensor(&mut r, &[4], -1.0, 1.0);

    let mut tape = GradTape::<f64>::new();
    let (out, param_ids, _) = model.forward_train(&mut tape, &frames).unwrap();
    let tgt = tape.constant(target.clone());
    let loss = mse_loss(&mut tape, out, tgt).unwrap();
    let grads = tape.backward(loss).unwrap();

    let n_params = param_ids.len();
    for _ in 0..6 {
        let pi = r.gen_range(0..n_params);
        let plen = tape.value(param_ids[pi]).len();
        let ci = r.gen_range(0..plen);
        let analytic = grads
            .wrt(param_ids[pi])
            .map(|g| g.data()[ci])
            .unwrap_or(0.0);
        let perturbed = |delta: f64| {
            let mut m = model.clone();
            let mut idx = 0;
            m.for_each_param_mut(&mut |t| {
                if idx == pi {
                    t.data_mut()[ci] += delta;
                }
                idx += 1;
            });
            model_fd_loss(&m, &frames, &target)
        };
        let fd = (perturbed(FD_STEP) - perturbed(-FD_STEP)) / (2.0 * FD_STEP);
        let err = rel_err(fd, analytic);
        assert!(
            err < MODEL_GRAD_TOL,
            "{kind:?} param {pi} coord {ci}: analytic {analytic} vs fd {fd} (rel err {err:.3e})"
        );
    }
}

fn grad_models_all() {
    for (i, kind) in VariantKind::ALL.iter().enumerate() {
        grad_model(*kind, 201 + i as u64);
    }
}

/// Every gradient check, for the acceptance run.
pub const GRAD_CHECKS: &[(&str, fn())] = &[
    ("relu", grad_relu),
    ("sigmoid", grad_sigmoid),
    ("tanh", grad_tanh),
    ("sqrt", grad_sqrt),
    ("add/sub/mul", grad_add_sub_mul),
    ("div", grad_div),
    ("scale", grad_scale),
    ("matmul", grad_matmul),
    ("conv3d same-padded", grad_conv3d_same_padded),
    ("conv3d strided", grad_conv3d_strided),
    ("conv3d kt=1", grad_conv3d_spatial_only),
    ("deconv3d", grad_deconv3d),
    ("maxpool3d", grad_maxpool3d),
    ("batchnorm", grad_batchnorm),
    ("spatial_avgpool", grad_spatial_avgpool),
    ("sum/mean", grad_sum_and_mean),
    ("reshape/transpose", grad_reshape_transpose),
    ("row/time ops", grad_row_and_time_ops),
    ("lstm_step", grad_lstm_step),
    ("convlstm_step", grad_convlstm_step),
    ("neg_pearson_loss", grad_neg_pearson_loss),
    ("mse_loss", grad_mse_loss),
    ("full models", grad_models_all),
];

// ── Oracle equivalence ────────────────────────────────────────────────

pub fn oracle_conv3d() {
    let mut r = rng(301);
    for inst in 0..ORACLE_INSTANCES {
        let (ci, co) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let (t, h, w) = (r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=6));
        let stride = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
        let pad = (r.gen_range(0..=1), r.gen_range(0..=1), r.gen_range(0..=1));
        let kt = r.gen_range(1..=(t + 2 * pad.0).min(3));
        let kh = r.gen_range(1..=(h + 2 * pad.1).min(3));
        let kw = r.gen_range(1..=(w + 2 * pad.2).min(3));
        let x = rand_tensor(&mut r, &[ci, t, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[co, ci, kt, kh, kw], -1.0, 1.0);
        let bias = if inst % 2 == 0 {
            Some(rand_tensor(&mut r, &[co], -1.0, 1.0))
        } else {
            None
        };
        let got = ops::conv3d_fwd(&x, &k, bias.as_ref(), stride, pad).unwrap();
        let want = conv3d_oracle(&x, &k, bias.as_ref(), stride, pad);
        assert_eq!(got.shape(), want.shape(), "instance {inst}");
        let err = max_rel_err(got.data(), want.data());
        assert!(err < ORACLE_TOL, "instance {inst}: rel err {err:.3e}");
    }
}

pub fn oracle_conv3d_fast_rows() {
    // widths >= 8 exercise the blocked stride-1 3-tap path specifically
    let mut r = rng(302);
    for inst in 0..ORACLE_INSTANCES {
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (t, h, w) = (r.gen_range(2..=4), r.gen_range(3..=6), r.gen_range(8..=19));
        let x = rand_tensor(&mut r, &[ci, t, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[co, ci, 3, 3, 3], -1.0, 1.0);
        let got = ops::conv3d_fwd(&x, &k, None, (1, 1, 1), (1, 1, 1)).unwrap();
        let want = conv3d_oracle(&x, &k, None, (1, 1, 1), (1, 1, 1));
        let err = max_rel_err(got.data(), want.data());
        assert!(err < ORACLE_TOL, "instance {inst}: rel err {err:.3e}");
    }
}

pub fn oracle_matmul() {
    let mut r = rng(303);
    for inst in 0..ORACLE_INSTANCES {
        let (m, k, n) = (r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=6));
        let a = rand_tensor(&mut r, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[k, n], -1.0, 1.0);
        let got = ops::matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        let err = max_rel_err(got.data(), want.data());
        assert!(err < ORACLE_TOL, "instance {inst}: rel err {err:.3e}");
    }
}

pub fn oracle_matmul_wide() {
    // inner dimensions past the 8-lane blocking boundary
    let mut r = rng(304);
    for inst in 0..ORACLE_INSTANCES {
        let (m, k, n) = (r.gen_range(1..=4), r.gen_range(7..=40), r.gen_range(1..=4));
        let a = rand_tensor(&mut r, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[k, n], -1.0, 1.0);
        let got = ops::matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        let err = max_rel_err(got.data(), want.data());
        assert!(err < ORACLE_TOL, "instance {inst}: rel err {err:.3e}");
    }
}

pub fn oracle_lstm_step() {
    let mut r = rng(305);
    for inst in 0..ORACLE_INSTANCES {
        let (nin, nh) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let mut cell = LstmCell::<f64>::new(nin, nh, &mut r);
        // decorrelate from the initializer's distribution
        cell.for_each_param_mut(&mut |t| {
            *t = t.map(|v| v * 3.0 + 0.1);
        });
        let x = rand_tensor(&mut r, &[1, nin], -1.0, 1.0);
        let h = rand_tensor(&mut r, &[1, nh], -1.0, 1.0);
        let c = rand_tensor(&mut r, &[1, nh], -1.0, 1.0);
        let (gh, gc) = cell.step(&x, &h, &c).unwrap();
        let (wh, wc) = lstm_step_oracle(&cell, &x, &h, &c);
        let err = max_rel_err(gh.data(), wh.data()).max(max_rel_err(gc.data(), wc.data()));
        assert!(err < ORACLE_TOL, "instance {inst}: rel err {err:.3e}");
    }
}

pub fn oracle_convlstm_step() {
    let mut r = rng(306);
    for inst in 0..ORACLE_INSTANCES {
        let (nin, nh) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let k = if inst % 2 == 0 { 3 } else { 1 };
        let (sh, sw) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let cell = ConvLstmCell::<f64>::new(nin, nh, k, &mut r);
        let x = rand_tensor(&mut r, &[nin, 1, sh, sw], -1.0, 1.0);
        let h = rand_tensor(&mut r, &[nh, 1, sh, sw], -1.0, 1.0);
        let c = rand_tensor(&mut r, &[nh, 1, sh, sw], -1.0, 1.0);
        let (gh, gc) = cell.step(&x, &h, &c).unwrap();
        let (wh, wc) = convlstm_step_oracle(&cell, &x, &h, &c);
        let err = max_rel_err(gh.data(), wh.data()).max(max_rel_err(gc.data(), wc.data()));
        assert!(err < ORACLE_TOL, "instance {inst}: rel err {err:.3e}");
    }
}

pub fn oracle_convlstm_reduces_to_lstm() {
    // A 1x1-kernel ConvLSTM on a single pixel is algebraically an LSTM whose
    // weight matrices are the transposed kernels. Agreement within 1e-6.
    let mut r = rng(307);
    for inst in 0..ORACLE_INSTANCES {
        let (nin, nh) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let conv_cell = ConvLstmCell::<f64>::new(nin, nh, 1, &mut r);
        let mut lstm_cell = LstmCell::<f64>::new(nin, nh, &mut r);
        // conv kernels are [H,In,1,1,1]; the LSTM wants [In,H]
        let transpose = |w: &Tensor<f64>| -> Tensor<f64> {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = w.data()[i * cols + j];
                }
            }
            Tensor::new(vec![cols, rows], out).unwrap()
        };
        lstm_cell.w_ix = transpose(&conv_cell.w_ix);
        lstm_cell.w_ih = transpose(&conv_cell.w_ih);
        lstm_cell.w_fx = transpose(&conv_cell.w_fx);
        lstm_cell.w_fh = transpose(&conv_cell.w_fh);
        lstm_cell.w_ox = transpose(&conv_cell.w_ox);
        lstm_cell.w_oh = transpose(&conv_cell.w_oh);
        lstm_cell.w_cx = transpose(&conv_cell.w_cx);
        lstm_cell.w_ch = transpose(&conv_cell.w_ch);

        let x = rand_tensor(&mut r, &[nin], -1.0, 1.0);
        let h = rand_tensor(&mut r, &[nh], -1.0, 1.0);
        let c = rand_tensor(&mut r, &[nh], -1.0, 1.0);
        let (ch2, cc2) = conv_cell
            .step(
                &x.reshape(&[nin, 1, 1, 1]).unwrap(),
                &h.reshape(&[nh, 1, 1, 1]).unwrap(),
                &c.reshape(&[nh, 1, 1, 1]).unwrap(),
            )
            .unwrap();
        let (lh2, lc2) = lstm_cell
            .step(
                &x.reshape(&[1, nin]).unwrap(),
                &h.reshape(&[1, nh]).unwrap(),
                &c.reshape(&[1, nh]).unwrap(),
            )
            .unwrap();
        for (a, b) in ch2.data().iter().zip(lh2.data()) {
            assert!((a - b).abs() < 1e-6, "instance {inst}: h {a} vs {b}");
        }
        for (a, b) in cc2.data().iter().zip(lc2.data()) {
            assert!((a - b).abs() < 1e-6, "instance {inst}: c {a} vs {b}");
        }
    }
}

pub fn oracle_deconv_adjoint() {
    // <conv(x; K), y> == <x, deconv(y; K)> for every geometry where the
    // deconv output extent reproduces x's extent exactly.
    let mut r = rng(308);
    for inst in 0..ORACLE_INSTANCES {
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let stride = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
        let pad = (r.gen_range(0..=1), r.gen_range(0..=1), r.gen_range(0..=1));
        let extent = |s: usize, p: usize, rr: &mut ChaCha8Rng| loop {
            let k = rr.gen_range(1..=4);
            let o = rr.gen_range(1..=3);
            let n = s * (o - 1) + k;
            if n > 2 * p {
                return (n - 2 * p, k);
            }
        };
        let (t, kt) = extent(stride.0, pad.0, &mut r);
        let (h, kh) = extent(stride.1, pad.1, &mut r);
        let (w, kw) = extent(stride.2, pad.2, &mut r);
        let x = rand_tensor(&mut r, &[ci, t, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[co, ci, kt, kh, kw], -1.0, 1.0);
        let fwd = ops::conv3d_fwd(&x, &k, None, stride, pad).unwrap();
        let y = rand_tensor(&mut r, fwd.shape(), -1.0, 1.0);
        // the conv kernel [Co,Ci,...] is the deconv kernel [Cin=Co,Cout=Ci,...]
        let back = deconv3d_raw(&y, &k, None, stride, pad).unwrap();
        assert_eq!(back.shape(), x.shape(), "instance {inst}");
        let lhs: f64 = fwd.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!(
            rel_err(lhs, rhs) < ORACLE_TOL,
            "instance {inst}: <conv x, y> {lhs} vs <x, deconv y> {rhs}"
        );
    }
}

/// Every oracle-equivalence check, for the acceptance run.
pub const ORACLE_CHECKS: &[(&str, fn())] = &[
    ("conv3d", oracle_conv3d),
    ("conv3d fast rows", oracle_conv3d_fast_rows),
    ("matmul", oracle_matmul),
    ("matmul wide", oracle_matmul_wide),
    ("lstm_step", oracle_lstm_step),
    ("convlstm_step", oracle_convlstm_step),
    ("convlstm = lstm at 1x1", oracle_convlstm_reduces_to_lstm),
    ("deconv adjoint", oracle_deconv_adjoint),
];
