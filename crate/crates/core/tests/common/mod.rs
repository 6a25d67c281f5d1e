//! Shared test support: independently coded reference implementations
//! ("oracles") and a finite-difference gradient checker.
//!
//! The oracles are deliberately written as plain nested loops with no code
//! shared with the library, so agreement between the two is evidence of
//! correctness rather than of copy-paste.

#![allow(dead_code)]

pub mod checks;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rppg::nn::{ConvLstmCell, LstmCell};
use rppg::tensor::tape::{GradTape, TapeId};
use rppg::{Result, Tensor};

/// Central-difference step for f64 gradient checks.
pub const FD_STEP: f64 = 1e-4;
/// Relative-error bound for analytic vs finite-difference gradients.
pub const GRAD_TOL: f64 = 1e-5;
/// Relative-error bound for oracle equivalence (f64 arithmetic).
pub const ORACLE_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a floor on the denominator so gradients near zero
/// are compared absolutely (finite differences carry ~1e-9 absolute noise).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

// ── Oracles ───────────────────────────────────────────────────────────

/// Reference 3-D convolution: input [Ci,T,H,W], kernel [Co,Ci,kT,kH,kW],
/// zero padding, direct six-deep loop.
pub fn conv3d_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Tensor<f64> {
    let (ci, t, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (co, kci, kt, kh, kw) = {
        let s = k.shape();
        (s[0], s[1], s[2], s[3], s[4])
    };
    assert_eq!(ci, kci);
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = pad;
    let ot = (t + 2 * pt - kt) / st + 1;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0f64; co * ot * oh * ow];
    for oc in 0..co {
        for it in 0..ot {
            for ih in 0..oh {
                for iw in 0..ow {
                    let mut acc = bias.map(|b| b.data()[oc]).unwrap_or(0.0);
                    for ic in 0..ci {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let xt = (it * st + dt) as isize - pt as isize;
                                    let xh = (ih * sh + dh) as isize - ph as isize;
                                    let xw = (iw * sw + dw) as isize - pw as isize;
                                    if xt < 0
                                        || xh < 0
                                        || xw < 0
                                        || xt as usize >= t
                                        || xh as usize >= h
                                        || xw as usize >= w
                                    {
                                        continue;
                                    }
                                    let xi = ((ic * t + xt as usize) * h + xh as usize) * w
                                        + xw as usize;
                                    let ki = (((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw;
                                    acc += xd[xi] * kd[ki];
                                }
                            }
                        }
                    }
                    out[((oc * ot + it) * oh + ih) * ow + iw] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co, ot, oh, ow], out).unwrap()
}

/// Reference matrix product: [m,k] x [k,n], triple loop.
pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn sigmoid_s(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Reference bias-free LSTM step on row vectors, all scalar arithmetic:
///   i = s(xWix + hWih), f = s(xWfx + hWfh), o = s(xWox + hWoh),
///   c' = f.c + i.tanh(xWcx + hWch),  h' = o.tanh(c').
pub fn lstm_step_oracle(
    cell: &LstmCell<f64>,
    x: &Tensor<f64>,
    h: &Tensor<f64>,
    c: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let nin = x.shape()[1];
    let nh = cell.hidden;
    let pre = |wx: &Tensor<f64>, wh: &Tensor<f64>, j: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..nin {
            acc += x.data()[i] * wx.data()[i * nh + j];
        }
        for i in 0..nh {
            acc += h.data()[i] * wh.data()[i * nh + j];
        }
        acc
    };
    let mut hn = vec![0.0f64; nh];
    let mut cn = vec![0.0f64; nh];
    for j in 0..nh {
        let ig = sigmoid_s(pre(&cell.w_ix, &cell.w_ih, j));
        let fg = sigmoid_s(pre(&cell.w_fx, &cell.w_fh, j));
        let og = sigmoid_s(pre(&cell.w_ox, &cell.w_oh, j));
        let gg = pre(&cell.w_cx, &cell.w_ch, j).tanh();
        cn[j] = fg * c.data()[j] + ig * gg;
        hn[j] = og * cn[j].tanh();
    }
    (
        Tensor::new(vec![1, nh], hn).unwrap(),
        Tensor::new(vec![1, nh], cn).unwrap(),
    )
}

/// Reference ConvLSTM step: same gate equations with the matrix products
/// replaced by same-padded 2-D convolutions (via the conv oracle).
pub fn convlstm_step_oracle(
    cell: &ConvLstmCell<f64>,
    x: &Tensor<f64>,
    h: &Tensor<f64>,
    c: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let p = cell.pad;
    let conv = |inp: &Tensor<f64>, w: &Tensor<f64>| -> Tensor<f64> {
        conv3d_oracle(inp, w, None, (1, 1, 1), (0, p, p))
    };
    let pre = |wx: &Tensor<f64>, wh: &Tensor<f64>| -> Vec<f64> {
        let a = conv(x, wx);
        let b = conv(h, wh);
        a.data().iter().zip(b.data()).map(|(u, v)| u + v).collect()
    };
    let ig = pre(&cell.w_ix, &cell.w_ih);
    let fg = pre(&cell.w_fx, &cell.w_fh);
    let og = pre(&cell.w_ox, &cell.w_oh);
    let gg = pre(&cell.w_cx, &cell.w_ch);
    let n = ig.len();
    let mut hn = vec![0.0f64; n];
    let mut cn = vec![0.0f64; n];
    for j in 0..n {
        let i = sigmoid_s(ig[j]);
        let f = sigmoid_s(fg[j]);
        let o = sigmoid_s(og[j]);
        let g = gg[j].tanh();
        cn[j] = f * c.data()[j] + i * g;
        hn[j] = o * cn[j].tanh();
    }
    (
        Tensor::new(h.shape().to_vec(), hn).unwrap(),
        Tensor::new(c.shape().to_vec(), cn).unwrap(),
    )
}

// ── Finite-difference gradient checker ────────────────────────────────

/// Builder for the graph under test: given a tape and the leaf ids (in the
/// order the leaves were supplied), return the output node. The builder must
/// be a pure function of the leaf values.
pub type GraphBuilder<'a> = &'a dyn Fn(&mut GradTape<f64>, &[TapeId]) -> Result<TapeId>;

fn eval_loss(leaves: &[Tensor<f64>], build: GraphBuilder, w: &Tensor<f64>) -> f64 {
    let mut tape = GradTape::<f64>::new();
    let ids: Vec<TapeId> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &ids).expect("graph build");
    let wid = tape.constant(w.clone());
    let prod = tape.mul(out, wid).expect("loss weighting");
    let loss = tape.sum(prod);
    tape.value(loss).item()
}

/// Check the analytic gradient of `build`'s output against central finite
/// differences. The output is contracted to a scalar with a fixed random
/// weighting so every output coordinate contributes. At most `max_coords`
/// coordinates per leaf are probed (all of them if the leaf is small).
pub fn check_gradients(
    name: &str,
    leaves: &[Tensor<f64>],
    build: GraphBuilder,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) {
    // Probe the output shape, then fix the contraction weights.
    let out_shape = {
        let mut tape = GradTape::<f64>::new();
        let ids: Vec<TapeId> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &ids).expect("graph build");
        tape.value(out).shape().to_vec()
    };
    let w = rand_tensor(rng, &out_shape, -1.0, 1.0);

    // Analytic gradients.
    let mut tape = GradTape::<f64>::new();
    let ids: Vec<TapeId> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &ids).expect("graph build");
    let wid = tape.constant(w.clone());
    let prod = tape.mul(out, wid).expect("loss weighting");
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).expect("backward");

    for (li, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; leaves[li].len()],
        };
        let n = leaves[li].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..n)).collect()
        };
        for &ci in &coords {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ci] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ci] -= FD_STEP;
            let fd = (eval_loss(&plus, build, &w) - eval_loss(&minus, build, &w))
                / (2.0 * FD_STEP);
            let err = rel_err(fd, analytic[ci]);
            assert!(
                err < GRAD_TOL,
                "{name}: leaf {li} coord {ci}: analytic {} vs fd {} (rel err {err:.3e})",
                analytic[ci],
                fd
            );
        }
    }
}

/// IBI train with sinusoidal modulation, generated beat by beat.
pub fn modulated_ibis(base_ms: f64, amp_ms: f64, f_mod: f64, dur_s: f64) -> rppg::pulse::IbiSeries {
    let mut times = vec![0.0];
    let mut t = 0.0;
    while t < dur_s {
        let ibi = base_ms + amp_ms * (2.0 * std::f64::consts::PI * f_mod * t).sin();
        t += ibi / 1000.0;
        times.push(t);
    }
    rppg::pulse::IbiSeries::from_peak_times(times).unwrap()
}

/// Random tensor whose values are mutually separated by well over the FD
/// step, for ops with argmax-style non-smoothness (max pooling).
pub fn rand_distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    // Fisher–Yates shuffle so the maxima land in random cells.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}
