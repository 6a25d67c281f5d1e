//! Layers shared by all pulse-network variants: 3-D/2-D convolution,
//! transposed convolution, max pooling, batch normalization, and the
//! bias-free LSTM / ConvLSTM gate cells.

use crate::error::Result;
use crate::tensor::ops::{self, Triple};
use crate::tensor::tape::{deconv3d_raw, GradTape, TapeId};
use crate::tensor::{lit, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Uniform init in +-sqrt(6 / fan_in). Samples in f64 so f32 and f64
/// instantiations of the same seed see the same weights.
pub fn uniform_init<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| lit::<E>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Batch statistics captured during a training forward pass, applied to the
/// running averages by the trainer after the batch join.
#[derive(Clone, Debug)]
pub struct BnStats<E: Scalar> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

// ── Convolution ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Conv3d<E: Scalar = f32> {
    pub kernel: Tensor<E>, // [Co,Ci,kT,kH,kW]
    pub bias: Tensor<E>,   // [Co]
    pub stride: Triple,
    pub padding: Triple,
}

impl<E: Scalar> Conv3d<E> {
    /// Unit-stride conv with "same" zero padding (odd kernels).
    pub fn same(cin: usize, cout: usize, k: Triple, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * k.0 * k.1 * k.2;
        Conv3d {
            kernel: uniform_init(&[cout, cin, k.0, k.1, k.2], fan_in, rng),
            bias: Tensor::zeros(&[cout]),
            stride: (1, 1, 1),
            padding: ((k.0 - 1) / 2, (k.1 - 1) / 2, (k.2 - 1) / 2),
        }
    }

    /// 1x1x1 unpadded projection conv.
    pub fn projection(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv3d {
            kernel: uniform_init(&[cout, cin, 1, 1, 1], cin, rng),
            bias: Tensor::zeros(&[cout]),
            stride: (1, 1, 1),
            padding: (0, 0, 0),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::conv3d_fwd(x, &self.kernel, Some(&self.bias), self.stride, self.padding)
    }

    pub fn forward_t(
        &self,
        tape: &mut GradTape<E>,
        x: TapeId,
        params: &mut Vec<TapeId>,
    ) -> Result<TapeId> {
        let k = tape.leaf(self.kernel.clone(), true);
        let b = tape.leaf(self.bias.clone(), true);
        params.push(k);
        params.push(b);
        tape.conv3d(x, k, Some(b), self.stride, self.padding)
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<E>)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

// ── Transposed convolution ────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Deconv3d<E: Scalar = f32> {
    pub kernel: Tensor<E>, // [Cin,Cout,kT,kH,kW]
    pub bias: Tensor<E>,   // [Cout]
    pub stride: Triple,
    pub padding: Triple,
}

impl<E: Scalar> Deconv3d<E> {
    /// Temporal upsampler: kernel 4x1x1, temporal stride 2, output T doubles.
    pub fn temporal_x2(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * 4;
        Deconv3d {
            kernel: uniform_init(&[cin, cout, 4, 1, 1], fan_in, rng),
            bias: Tensor::zeros(&[cout]),
            stride: (2, 1, 1),
            padding: (1, 0, 0),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        deconv3d_raw(x, &self.kernel, Some(&self.bias), self.stride, self.padding)
    }

    pub fn forward_t(
        &self,
        tape: &mut GradTape<E>,
        x: TapeId,
        params: &mut Vec<TapeId>,
    ) -> Result<TapeId> {
        let k = tape.leaf(self.kernel.clone(), true);
        let b = tape.leaf(self.bias.clone(), true);
        params.push(k);
        params.push(b);
        tape.deconv3d(x, k, Some(b), self.stride, self.padding)
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<E>)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

// ── Batch normalization ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BatchNorm<E: Scalar = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub eps: E,
    pub momentum: E,
}

impl<E: Scalar> BatchNorm<E> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], E::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            eps: lit(BN_EPS),
            momentum: lit(BN_MOMENTUM),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn as_batched(&self, shape: &[usize]) -> Vec<usize> {
        // activations flow as [C,...]; insert the batch axis for the kernels
        let mut s = vec![1usize, shape[0]];
        s.push(shape[1..].iter().product());
        s
    }

    /// Eval mode: normalize with running statistics.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let flat = x.reshape(&self.as_batched(x.shape()))?;
        let y = ops::batchnorm_fwd(
            &flat,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )?;
        y.reshape(x.shape())
    }

    /// Training mode: batch statistics, recorded for the running update.
    pub fn forward_t(
        &self,
        tape: &mut GradTape<E>,
        x: TapeId,
        params: &mut Vec<TapeId>,
        stats: &mut Vec<BnStats<E>>,
    ) -> Result<TapeId> {
        let orig_shape = tape.value(x).shape().to_vec();
        let flat = tape.reshape(x, &self.as_batched(&orig_shape))?;
        let g = tape.leaf(self.gamma.clone(), true);
        let b = tape.leaf(self.beta.clone(), true);
        params.push(g);
        params.push(b);
        let (y, mean, var) = tape.batchnorm_train(flat, g, b, self.eps)?;
        stats.push(BnStats { mean, var });
        tape.reshape(y, &orig_shape)
    }

    pub fn apply_stats(&mut self, s: &BnStats<E>) {
        debug_assert_eq!(s.mean.len(), self.channels());
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (E::one() - m) * self.running_mean[c] + m * s.mean[c];
            self.running_var[c] = (E::one() - m) * self.running_var[c] + m * s.var[c];
        }
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    /// Running statistics serialized alongside trainable parameters.
    pub fn stats_tensors(&self) -> (Tensor<E>, Tensor<E>) {
        (
            Tensor::from_vec(self.running_mean.clone()),
            Tensor::from_vec(self.running_var.clone()),
        )
    }

    pub fn set_stats_tensors(&mut self, mean: &Tensor<E>, var: &Tensor<E>) {
        self.running_mean = mean.data().to_vec();
        self.running_var = var.data().to_vec();
    }
}

// ── Max pooling ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct MaxPool3d {
    pub kernel: Triple,
    pub stride: Triple,
}

impl MaxPool3d {
    pub fn new(kernel: Triple, stride: Triple) -> Self {
        MaxPool3d { kernel, stride }
    }

    pub fn forward<E: Scalar>(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(ops::maxpool3d_fwd(x, self.kernel, self.stride)?.0)
    }

    pub fn forward_t<E: Scalar>(&self, tape: &mut GradTape<E>, x: TapeId) -> Result<TapeId> {
        tape.maxpool3d(x, self.kernel, self.stride)
    }
}

/// Per-channel, per-frame mean over the spatial plane: [C,T,H,W] -> [C,T,1,1].
pub fn spatial_global_avgpool<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    ops::spatial_avgpool_fwd(x)
}

// ── Recurrent cells ───────────────────────────────────────────────────
// Gate equations, bias-free:
//   i = sigmoid(Wi_x * X + Wi_h * H),  f = sigmoid(Wf_x * X + Wf_h * H),
//   o = sigmoid(Wo_x * X + Wo_h * H),
//   c' = f . c + i . tanh(Wc_x * X + Wc_h * H),  H' = o . tanh(c')
// where * is matrix multiplication for LSTM and 2-D same-padded
// convolution for ConvLSTM, and . is the Hadamard product.

#[derive(Clone, Debug)]
pub struct LstmCell<E: Scalar = f32> {
    // [In,H] input-to-hidden and [H,H] hidden-to-hidden weights per gate
    pub w_ix: Tensor<E>,
    pub w_ih: Tensor<E>,
    pub w_fx: Tensor<E>,
    pub w_fh: Tensor<E>,
    pub w_ox: Tensor<E>,
    pub w_oh: Tensor<E>,
    pub w_cx: Tensor<E>,
    pub w_ch: Tensor<E>,
    pub hidden: usize,
}

impl<E: Scalar> LstmCell<E> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = |rng: &mut ChaCha8Rng| uniform_init(&[input, hidden], input, rng);
        let wh = |rng: &mut ChaCha8Rng| uniform_init(&[hidden, hidden], hidden, rng);
        LstmCell {
            w_ix: wx(rng),
            w_ih: wh(rng),
            w_fx: wx(rng),
            w_fh: wh(rng),
            w_ox: wx(rng),
            w_oh: wh(rng),
            w_cx: wx(rng),
            w_ch: wh(rng),
            hidden,
        }
    }

    /// One step on row vectors: x [1,In], h/c [1,H].
    pub fn step(
        &self,
        x: &Tensor<E>,
        h: &Tensor<E>,
        c: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let gate = |wx: &Tensor<E>, wh: &Tensor<E>| -> Result<Tensor<E>> {
            ops::add(&ops::matmul(x, wx)?, &ops::matmul(h, wh)?)
        };
        let i = ops::sigmoid(&gate(&self.w_ix, &self.w_ih)?);
        let f = ops::sigmoid(&gate(&self.w_fx, &self.w_fh)?);
        let o = ops::sigmoid(&gate(&self.w_ox, &self.w_oh)?);
        let g = ops::tanh(&gate(&self.w_cx, &self.w_ch)?);
        let c_next = ops::add(&ops::mul(&f, c)?, &ops::mul(&i, &g)?)?;
        let h_next = ops::mul(&o, &ops::tanh(&c_next))?;
        Ok((h_next, c_next))
    }

    /// Insert this cell's weights on the tape (once per sequence).
    pub fn weights_t(&self, tape: &mut GradTape<E>, params: &mut Vec<TapeId>) -> [TapeId; 8] {
        let ids = [
            tape.leaf(self.w_ix.clone(), true),
            tape.leaf(self.w_ih.clone(), true),
            tape.leaf(self.w_fx.clone(), true),
            tape.leaf(self.w_fh.clone(), true),
            tape.leaf(self.w_ox.clone(), true),
            tape.leaf(self.w_oh.clone(), true),
            tape.leaf(self.w_cx.clone(), true),
            tape.leaf(self.w_ch.clone(), true),
        ];
        params.extend_from_slice(&ids);
        ids
    }

    pub fn step_t(
        tape: &mut GradTape<E>,
        w: &[TapeId; 8],
        x: TapeId,
        h: TapeId,
        c: TapeId,
    ) -> Result<(TapeId, TapeId)> {
        let gate = |tape: &mut GradTape<E>, wx: TapeId, wh: TapeId| -> Result<TapeId> {
            let a = tape.matmul(x, wx)?;
            let b = tape.matmul(h, wh)?;
            tape.add(a, b)
        };
        let i_pre = gate(tape, w[0], w[1])?;
        let f_pre = gate(tape, w[2], w[3])?;
        let o_pre = gate(tape, w[4], w[5])?;
        let g_pre = gate(tape, w[6], w[7])?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let o = tape.sigmoid(o_pre);
        let g = tape.tanh(g_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (name, t) in [
            ("w_ix", &self.w_ix),
            ("w_ih", &self.w_ih),
            ("w_fx", &self.w_fx),
            ("w_fh", &self.w_fh),
            ("w_ox", &self.w_ox),
            ("w_oh", &self.w_oh),
            ("w_cx", &self.w_cx),
            ("w_ch", &self.w_ch),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<E>)) {
        for t in [
            &mut self.w_ix,
            &mut self.w_ih,
            &mut self.w_fx,
            &mut self.w_fh,
            &mut self.w_ox,
            &mut self.w_oh,
            &mut self.w_cx,
            &mut self.w_ch,
        ] {
            f(t);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLstmCell<E: Scalar = f32> {
    // conv kernels [H_ch, In_ch, 1, k, k] (input) and [H_ch, H_ch, 1, k, k] (hidden)
    pub w_ix: Tensor<E>,
    pub w_ih: Tensor<E>,
    pub w_fx: Tensor<E>,
    pub w_fh: Tensor<E>,
    pub w_ox: Tensor<E>,
    pub w_oh: Tensor<E>,
    pub w_cx: Tensor<E>,
    pub w_ch: Tensor<E>,
    pub hidden: usize,
    pub pad: usize,
}

impl<E: Scalar> ConvLstmCell<E> {
    pub fn new(input: usize, hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = |rng: &mut ChaCha8Rng| {
            uniform_init(&[hidden, input, 1, k, k], input * k * k, rng)
        };
        let wh = |rng: &mut ChaCha8Rng| {
            uniform_init(&[hidden, hidden, 1, k, k], hidden * k * k, rng)
        };
        ConvLstmCell {
            w_ix: wx(rng),
            w_ih: wh(rng),
            w_fx: wx(rng),
            w_fh: wh(rng),
            w_ox: wx(rng),
            w_oh: wh(rng),
            w_cx: wx(rng),
            w_ch: wh(rng),
            hidden,
            pad: (k - 1) / 2,
        }
    }

    fn conv(&self, x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
        ops::conv3d_fwd(x, w, None, (1, 1, 1), (0, self.pad, self.pad))
    }

    /// One step on frames: x [In,1,H,W], h/c [Hc,1,H,W].
    pub fn step(
        &self,
        x: &Tensor<E>,
        h: &Tensor<E>,
        c: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let gate = |wx: &Tensor<E>, wh: &Tensor<E>| -> Result<Tensor<E>> {
            ops::add(&self.conv(x, wx)?, &self.conv(h, wh)?)
        };
        let i = ops::sigmoid(&gate(&self.w_ix, &self.w_ih)?);
        let f = ops::sigmoid(&gate(&self.w_fx, &self.w_fh)?);
        let o = ops::sigmoid(&gate(&self.w_ox, &self.w_oh)?);
        let g = ops::tanh(&gate(&self.w_cx, &self.w_ch)?);
        let c_next = ops::add(&ops::mul(&f, c)?, &ops::mul(&i, &g)?)?;
        let h_next = ops::mul(&o, &ops::tanh(&c_next))?;
        Ok((h_next, c_next))
    }

    pub fn weights_t(&self, tape: &mut GradTape<E>, params: &mut Vec<TapeId>) -> [TapeId; 8] {
        let ids = [
            tape.leaf(self.w_ix.clone(), true),
            tape.leaf(self.w_ih.clone(), true),
            tape.leaf(self.w_fx.clone(), true),
            tape.leaf(self.w_fh.clone(), true),
            tape.leaf(self.w_ox.clone(), true),
            tape.leaf(self.w_oh.clone(), true),
            tape.leaf(self.w_cx.clone(), true),
            tape.leaf(self.w_ch.clone(), true),
        ];
        params.extend_from_slice(&ids);
        ids
    }

    pub fn step_t(
        tape: &mut GradTape<E>,
        w: &[TapeId; 8],
        pad: usize,
        x: TapeId,
        h: TapeId,
        c: TapeId,
    ) -> Result<(TapeId, TapeId)> {
        let gate = |tape: &mut GradTape<E>, wx: TapeId, wh: TapeId| -> Result<TapeId> {
            let a = tape.conv3d(x, wx, None, (1, 1, 1), (0, pad, pad))?;
            let b = tape.conv3d(h, wh, None, (1, 1, 1), (0, pad, pad))?;
            tape.add(a, b)
        };
        let i_pre = gate(tape, w[0], w[1])?;
        let f_pre = gate(tape, w[2], w[3])?;
        let o_pre = gate(tape, w[4], w[5])?;
        let g_pre = gate(tape, w[6], w[7])?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let o = tape.sigmoid(o_pre);
        let g = tape.tanh(g_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (name, t) in [
            ("w_ix", &self.w_ix),
            ("w_ih", &self.w_ih),
            ("w_fx", &self.w_fx),
            ("w_fh", &self.w_fh),
            ("w_ox", &self.w_ox),
            ("w_oh", &self.w_oh),
            ("w_cx", &self.w_cx),
            ("w_ch", &self.w_ch),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<E>)) {
        for t in [
            &mut self.w_ix,
            &mut self.w_ih,
            &mut self.w_fx,
            &mut self.w_fh,
            &mut self.w_ox,
            &mut self.w_oh,
            &mut self.w_cx,
            &mut self.w_ch,
        ] {
            f(t);
        }
    }
}
