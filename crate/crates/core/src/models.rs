//! The pulse-network variants: a shared convolutional trunk followed by a
//! variant-specific temporal head, mapping a video clip [3,T,H,W] to a pulse
//! waveform of the same temporal length.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BnStats, Conv3d, ConvLstmCell, Deconv3d, LstmCell, MaxPool3d};
use crate::pulse::PulseSignal;
use crate::tensor::ops;
use crate::tensor::tape::{GradTape, TapeId};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::str::FromStr;

/// Spatial floor: four spatial halvings leave a 2x2 plane.
pub const MIN_SPATIAL: usize = 32;
/// Recurrent depth (stacked layers).
pub const RECURRENT_LAYERS: usize = 2;
/// ConvLSTM gate kernel size.
pub const CONVLSTM_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Cnn2d,
    Cnn3d,
    Cnn3dEd,
    Lstm,
    BiLstm,
    ConvLstm,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Cnn2d,
        VariantKind::Cnn3d,
        VariantKind::Cnn3dEd,
        VariantKind::Lstm,
        VariantKind::BiLstm,
        VariantKind::ConvLstm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Cnn2d => "2dcnn",
            VariantKind::Cnn3d => "3dcnn",
            VariantKind::Cnn3dEd => "3dcnn-ed",
            VariantKind::Lstm => "lstm",
            VariantKind::BiLstm => "bilstm",
            VariantKind::ConvLstm => "convlstm",
        }
    }

    fn uses_temporal_conv(&self) -> bool {
        matches!(self, VariantKind::Cnn3d | VariantKind::Cnn3dEd)
    }

}

impl FromStr for VariantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2dcnn" => Ok(VariantKind::Cnn2d),
            "3dcnn" => Ok(VariantKind::Cnn3d),
            "3dcnn-ed" => Ok(VariantKind::Cnn3dEd),
            "lstm" => Ok(VariantKind::Lstm),
            "bilstm" => Ok(VariantKind::BiLstm),
            "convlstm" => Ok(VariantKind::ConvLstm),
            other => Err(Error::invalid(format!(
                "unknown variant '{other}' (expected 2dcnn|3dcnn|3dcnn-ed|lstm|bilstm|convlstm)"
            ))),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: VariantKind,
    /// Output channels of the four trunk blocks.
    pub channels: [usize; 4],
}

impl ModelConfig {
    pub fn new(kind: VariantKind) -> Self {
        ModelConfig {
            kind,
            channels: [32, 64, 64, 64],
        }
    }

    /// Same structure with every block at `width` channels.
    pub fn with_width(kind: VariantKind, width: usize) -> Self {
        ModelConfig {
            kind,
            channels: [width; 4],
        }
    }
}

// ── Input / output value types ────────────────────────────────────────

/// Frame sequence [3,T,H,W] with values in [0,1], plus its frame rate.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, fps: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::invalid(format!(
                "clip frames must be [3,T,H,W], got {s:?}"
            )));
        }
        if fps <= 0.0 {
            return Err(Error::invalid("clip fps must be positive"));
        }
        if frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("clip values must lie in [0,1]"));
        }
        Ok(VideoClip { frames, fps })
    }

    pub fn temporal_len(&self) -> usize {
        self.frames.shape()[1]
    }
}

// ── Model ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
struct TrunkBlock<E: Scalar> {
    conv1: Conv3d<E>,
    bn1: BatchNorm<E>,
    conv2: Conv3d<E>,
    bn2: BatchNorm<E>,
    pool: MaxPool3d,
}

#[derive(Clone, Debug)]
enum RecurrentLayer<E: Scalar> {
    Lstm(LstmCell<E>),
    BiLstm(LstmCell<E>, LstmCell<E>),
    ConvLstm(ConvLstmCell<E>),
}

/// A pulse-extraction network: trunk f (subspace projection) followed by the
/// channel-aggregation head g.
#[derive(Clone, Debug)]
pub struct PulseNet<E: Scalar = f32> {
    pub config: ModelConfig,
    blocks: Vec<TrunkBlock<E>>,
    decoder: Vec<(Deconv3d<E>, BatchNorm<E>)>,
    recurrent: Vec<RecurrentLayer<E>>,
    proj_w: Tensor<E>, // [Cfinal,1]
    proj_b: Tensor<E>, // [1]
}

impl<E: Scalar> PulseNet<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kt = if config.kind.uses_temporal_conv() { 3 } else { 1 };
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3usize;
        for (b, &cout) in config.channels.iter().enumerate() {
            // encoder pools 2 and 3 are 2x2x2 for the ED variant
            let pool = if config.kind == VariantKind::Cnn3dEd && (b == 1 || b == 2) {
                MaxPool3d::new((2, 2, 2), (2, 2, 2))
            } else {
                MaxPool3d::new((1, 2, 2), (1, 2, 2))
            };
            blocks.push(TrunkBlock {
                conv1: Conv3d::same(cin, cout, (kt, 3, 3), &mut rng),
                bn1: BatchNorm::new(cout),
                conv2: Conv3d::same(cout, cout, (kt, 3, 3), &mut rng),
                bn2: BatchNorm::new(cout),
                pool,
            });
            cin = cout;
        }
        let trunk_out = config.channels[3];
        let mut decoder = Vec::new();
        if config.kind == VariantKind::Cnn3dEd {
            for _ in 0..2 {
                decoder.push((
                    Deconv3d::temporal_x2(trunk_out, trunk_out, &mut rng),
                    BatchNorm::new(trunk_out),
                ));
            }
        }
        let width = trunk_out;
        let mut recurrent = Vec::new();
        for layer in 0..RECURRENT_LAYERS {
            match config.kind {
                VariantKind::Lstm => {
                    let input = width;
                    recurrent.push(RecurrentLayer::Lstm(LstmCell::new(input, width, &mut rng)));
                }
                VariantKind::BiLstm => {
                    let input = if layer == 0 { width } else { 2 * width };
                    recurrent.push(RecurrentLayer::BiLstm(
                        LstmCell::new(input, width, &mut rng),
                        LstmCell::new(input, width, &mut rng),
                    ));
                }
                VariantKind::ConvLstm => {
                    recurrent.push(RecurrentLayer::ConvLstm(ConvLstmCell::new(
                        width,
                        width,
                        CONVLSTM_KERNEL,
                        &mut rng,
                    )));
                }
                _ => {}
            }
        }
        let proj_in = match config.kind {
            VariantKind::BiLstm => 2 * width,
            _ => width,
        };
        let proj_w = crate::nn::uniform_init(&[proj_in, 1], proj_in, &mut rng);
        let proj_b = Tensor::zeros(&[1]);
        PulseNet {
            config,
            blocks,
            decoder,
            recurrent,
            proj_w,
            proj_b,
        }
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[0] != 3 {
            return Err(Error::invalid(format!("expected [3,T,H,W] input, got {shape:?}")));
        }
        let (t, h, w) = (shape[1], shape[2], shape[3]);
        if h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(Error::invalid(format!(
                "spatial extent {h}x{w} below the {MIN_SPATIAL}x{MIN_SPATIAL} floor"
            )));
        }
        if self.config.kind == VariantKind::Cnn3dEd && t % 4 != 0 {
            return Err(Error::invalid(format!(
                "encoder-decoder variant needs T divisible by 4, got {t}"
            )));
        }
        Ok(())
    }

    // ── Inference path ────────────────────────────────────────────────

    fn block_forward(&self, b: &TrunkBlock<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let x = ops::relu(&b.bn1.forward(&b.conv1.forward(x)?)?);
        let x = ops::relu(&b.bn2.forward(&b.conv2.forward(&x)?)?);
        b.pool.forward(&x)
    }

    fn run_lstm_raw(
        &self,
        cell: &LstmCell<E>,
        seq: &Tensor<E>, // [T,C]
        reversed: bool,
    ) -> Result<Tensor<E>> {
        let t_len = seq.shape()[0];
        let mut h = Tensor::zeros(&[1, cell.hidden]);
        let mut c = Tensor::zeros(&[1, cell.hidden]);
        let mut rows = Vec::with_capacity(t_len);
        let order: Vec<usize> = if reversed {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for &t in &order {
            let x = ops::slice_row(seq, t)?;
            let (h2, c2) = cell.step(&x, &h, &c)?;
            h = h2;
            c = c2;
            rows.push(h.clone());
        }
        if reversed {
            rows.reverse();
        }
        let refs: Vec<&Tensor<E>> = rows.iter().collect();
        ops::stack_rows(&refs)
    }

    /// Head output as a [T,C] sequence ready for the final projection.
    fn head_sequence(&self, trunk_out: Tensor<E>) -> Result<Tensor<E>> {
        match self.config.kind {
            VariantKind::Cnn2d | VariantKind::Cnn3d => {
                let pooled = ops::spatial_avgpool_fwd(&trunk_out)?;
                let s = pooled.shape().to_vec();
                ops::transpose2d(&pooled.reshape(&[s[0], s[1]])?)
            }
            VariantKind::Cnn3dEd => {
                let mut x = trunk_out;
                for (deconv, bn) in &self.decoder {
                    x = ops::relu(&bn.forward(&deconv.forward(&x)?)?);
                }
                let pooled = ops::spatial_avgpool_fwd(&x)?;
                let s = pooled.shape().to_vec();
                ops::transpose2d(&pooled.reshape(&[s[0], s[1]])?)
            }
            VariantKind::Lstm | VariantKind::BiLstm => {
                let pooled = ops::spatial_avgpool_fwd(&trunk_out)?;
                let s = pooled.shape().to_vec();
                let mut seq = ops::transpose2d(&pooled.reshape(&[s[0], s[1]])?)?;
                for layer in &self.recurrent {
                    seq = match layer {
                        RecurrentLayer::Lstm(cell) => self.run_lstm_raw(cell, &seq, false)?,
                        RecurrentLayer::BiLstm(fwd, bwd) => {
                            let a = self.run_lstm_raw(fwd, &seq, false)?;
                            let b = self.run_lstm_raw(bwd, &seq, true)?;
                            ops::concat_cols(&a, &b)?
                        }
                        RecurrentLayer::ConvLstm(_) => unreachable!(),
                    };
                }
                Ok(seq)
            }
            VariantKind::ConvLstm => {
                let mut x = trunk_out;
                for layer in &self.recurrent {
                    let cell = match layer {
                        RecurrentLayer::ConvLstm(c) => c,
                        _ => unreachable!(),
                    };
                    let s = x.shape().to_vec();
                    let t_len = s[1];
                    let (hc, hh, hw) = (cell.hidden, s[2], s[3]);
                    let mut h = Tensor::zeros(&[hc, 1, hh, hw]);
                    let mut c = Tensor::zeros(&[hc, 1, hh, hw]);
                    let mut frames = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let xt = ops::time_slice(&x, t)?;
                        let (h2, c2) = cell.step(&xt, &h, &c)?;
                        h = h2;
                        c = c2;
                        frames.push(h.clone());
                    }
                    let refs: Vec<&Tensor<E>> = frames.iter().collect();
                    x = ops::stack_time(&refs)?;
                }
                // global average pooling after temporal propagation
                let pooled = ops::spatial_avgpool_fwd(&x)?;
                let s = pooled.shape().to_vec();
                ops::transpose2d(&pooled.reshape(&[s[0], s[1]])?)
            }
        }
    }

    /// Full forward on raw frames: [3,T,H,W] -> pulse samples of length T.
    pub fn forward_frames(&self, frames: &Tensor<E>) -> Result<Tensor<E>> {
        self.validate_input(frames.shape())?;
        let mut x = frames.clone();
        for b in &self.blocks {
            x = self.block_forward(b, &x)?;
        }
        let seq = self.head_sequence(x)?;
        let out = ops::matmul(&seq, &self.proj_w)?; // [T,1]
        let t_len = out.shape()[0];
        let bias = self.proj_b.data()[0];
        out.map(|v| v + bias).reshape(&[t_len])
    }

    /// Intermediate feature map after trunk block `stage` (and, for the
    /// encoder-decoder variant, stages 4-5 for the two decoder layers).
    pub fn dump_features(&self, frames: &Tensor<E>, stage: usize) -> Result<Tensor<E>> {
        self.validate_input(frames.shape())?;
        let n_stages = self.blocks.len() + self.decoder.len();
        if stage >= n_stages {
            return Err(Error::invalid(format!(
                "stage {stage} out of range (variant has {n_stages} stages)"
            )));
        }
        let mut x = frames.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            x = self.block_forward(b, &x)?;
            if i == stage {
                return Ok(x);
            }
        }
        for (i, (deconv, bn)) in self.decoder.iter().enumerate() {
            x = ops::relu(&bn.forward(&deconv.forward(&x)?)?);
            if self.blocks.len() + i == stage {
                return Ok(x);
            }
        }
        unreachable!()
    }

    // ── Training path ─────────────────────────────────────────────────

    /// Forward on a tape. Returns the output id (shape [T]), the parameter
    /// leaf ids (same order as `for_each_param`), and the batch-norm batch
    /// statistics in layer order.
    pub fn forward_train(
        &self,
        tape: &mut GradTape<E>,
        frames: &Tensor<E>,
    ) -> Result<(TapeId, Vec<TapeId>, Vec<BnStats<E>>)> {
        self.validate_input(frames.shape())?;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut x = tape.constant(frames.clone());
        for b in &self.blocks {
            let c1 = b.conv1.forward_t(tape, x, &mut params)?;
            let n1 = b.bn1.forward_t(tape, c1, &mut params, &mut stats)?;
            let r1 = tape.relu(n1);
            let c2 = b.conv2.forward_t(tape, r1, &mut params)?;
            let n2 = b.bn2.forward_t(tape, c2, &mut params, &mut stats)?;
            let r2 = tape.relu(n2);
            x = b.pool.forward_t(tape, r2)?;
        }
        let seq = self.head_sequence_t(tape, x, &mut params, &mut stats)?;
        let w = tape.leaf(self.proj_w.clone(), true);
        let b = tape.leaf(self.proj_b.clone(), true);
        let out = tape.matmul(seq, w)?; // [T,1]
        let t_len = tape.value(out).shape()[0];
        let flat = tape.reshape(out, &[t_len])?;
        // broadcast the scalar bias as matmul(ones[T,1], b[1,1]) so it stays
        // on the tape
        let bias_vec = {
            let ones_col = tape.constant(Tensor::full(&[t_len, 1], E::one()));
            let b_mat = tape.reshape(b, &[1, 1])?;
            let prod = tape.matmul(ones_col, b_mat)?;
            tape.reshape(prod, &[t_len])?
        };
        params.push(w);
        params.push(b);
        let out_id = tape.add(flat, bias_vec)?;
        Ok((out_id, params, stats))
    }

    fn run_lstm_t(
        &self,
        tape: &mut GradTape<E>,
        w: &[TapeId; 8],
        hidden: usize,
        seq: TapeId, // [T,C]
        reversed: bool,
    ) -> Result<TapeId> {
        let t_len = tape.value(seq).shape()[0];
        let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
        let order: Vec<usize> = if reversed {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        let mut rows = vec![TapeId(0); t_len];
        for &t in &order {
            let x = tape.slice_row(seq, t)?;
            let (h2, c2) = LstmCell::step_t(tape, w, x, h, c)?;
            h = h2;
            c = c2;
            rows[t] = h;
        }
        tape.stack_rows(&rows)
    }

    fn head_sequence_t(
        &self,
        tape: &mut GradTape<E>,
        trunk_out: TapeId,
        params: &mut Vec<TapeId>,
        stats: &mut Vec<BnStats<E>>,
    ) -> Result<TapeId> {
        let to_seq = |tape: &mut GradTape<E>, x: TapeId| -> Result<TapeId> {
            let pooled = tape.spatial_avgpool(x)?;
            let s = tape.value(pooled).shape().to_vec();
            let flat = tape.reshape(pooled, &[s[0], s[1]])?;
            tape.transpose2d(flat)
        };
        match self.config.kind {
            VariantKind::Cnn2d | VariantKind::Cnn3d => to_seq(tape, trunk_out),
            VariantKind::Cnn3dEd => {
                let mut x = trunk_out;
                for (deconv, bn) in &self.decoder {
                    let d = deconv.forward_t(tape, x, params)?;
                    let n = bn.forward_t(tape, d, params, stats)?;
                    x = tape.relu(n);
                }
                to_seq(tape, x)
            }
            VariantKind::Lstm | VariantKind::BiLstm => {
                let mut seq = to_seq(tape, trunk_out)?;
                for layer in &self.recurrent {
                    seq = match layer {
                        RecurrentLayer::Lstm(cell) => {
                            let w = cell.weights_t(tape, params);
                            self.run_lstm_t(tape, &w, cell.hidden, seq, false)?
                        }
                        RecurrentLayer::BiLstm(fwd, bwd) => {
                            let wf = fwd.weights_t(tape, params);
                            let wb = bwd.weights_t(tape, params);
                            let a = self.run_lstm_t(tape, &wf, fwd.hidden, seq, false)?;
                            let b = self.run_lstm_t(tape, &wb, bwd.hidden, seq, true)?;
                            tape.concat_cols(a, b)?
                        }
                        RecurrentLayer::ConvLstm(_) => unreachable!(),
                    };
                }
                Ok(seq)
            }
            VariantKind::ConvLstm => {
                let mut x = trunk_out;
                for layer in &self.recurrent {
                    let cell = match layer {
                        RecurrentLayer::ConvLstm(c) => c,
                        _ => unreachable!(),
                    };
                    let w = cell.weights_t(tape, params);
                    let s = tape.value(x).shape().to_vec();
                    let t_len = s[1];
                    let zero = Tensor::zeros(&[cell.hidden, 1, s[2], s[3]]);
                    let mut h = tape.constant(zero.clone());
                    let mut c = tape.constant(zero);
                    let mut frames = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let xt = tape.time_slice(x, t)?;
                        let (h2, c2) = ConvLstmCell::step_t(tape, &w, cell.pad, xt, h, c)?;
                        h = h2;
                        c = c2;
                        frames.push(h);
                    }
                    x = tape.stack_time(&frames)?;
                }
                to_seq(tape, x)
            }
        }
    }

    // ── Parameter traversal (canonical order, shared by the training
    //    path, the optimizer, and the checkpoint format) ───────────────

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv1.for_each_param(&format!("block{i}.conv1"), f);
            b.bn1.for_each_param(&format!("block{i}.bn1"), f);
            b.conv2.for_each_param(&format!("block{i}.conv2"), f);
            b.bn2.for_each_param(&format!("block{i}.bn2"), f);
        }
        for (i, (deconv, bn)) in self.decoder.iter().enumerate() {
            deconv.for_each_param(&format!("decoder{i}.deconv"), f);
            bn.for_each_param(&format!("decoder{i}.bn"), f);
        }
        for (i, layer) in self.recurrent.iter().enumerate() {
            match layer {
                RecurrentLayer::Lstm(cell) => cell.for_each_param(&format!("rnn{i}"), f),
                RecurrentLayer::BiLstm(fwd, bwd) => {
                    fwd.for_each_param(&format!("rnn{i}.fwd"), f);
                    bwd.for_each_param(&format!("rnn{i}.bwd"), f);
                }
                RecurrentLayer::ConvLstm(cell) => cell.for_each_param(&format!("rnn{i}"), f),
            }
        }
        f("proj.weight".into(), &self.proj_w);
        f("proj.bias".into(), &self.proj_b);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<E>)) {
        for b in &mut self.blocks {
            b.conv1.for_each_param_mut(f);
            b.bn1.for_each_param_mut(f);
            b.conv2.for_each_param_mut(f);
            b.bn2.for_each_param_mut(f);
        }
        for (deconv, bn) in &mut self.decoder {
            deconv.for_each_param_mut(f);
            bn.for_each_param_mut(f);
        }
        for layer in &mut self.recurrent {
            match layer {
                RecurrentLayer::Lstm(cell) => cell.for_each_param_mut(f),
                RecurrentLayer::BiLstm(fwd, bwd) => {
                    fwd.for_each_param_mut(f);
                    bwd.for_each_param_mut(f);
                }
                RecurrentLayer::ConvLstm(cell) => cell.for_each_param_mut(f),
            }
        }
        f(&mut self.proj_w);
        f(&mut self.proj_b);
    }

    pub fn for_each_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<E>)) {
        for b in &mut self.blocks {
            f(&mut b.bn1);
            f(&mut b.bn2);
        }
        for (_, bn) in &mut self.decoder {
            f(bn);
        }
    }

    pub fn for_each_bn(&self, f: &mut dyn FnMut(&BatchNorm<E>)) {
        for b in &self.blocks {
            f(&b.bn1);
            f(&b.bn2);
        }
        for (_, bn) in &self.decoder {
            f(bn);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, _| n += 1);
        n
    }

    /// Apply batch-norm batch statistics (same order as emitted by
    /// `forward_train`) to the running averages.
    pub fn update_running_stats(&mut self, stats: &[BnStats<E>]) {
        let mut i = 0;
        self.for_each_bn_mut(&mut |bn| {
            if let Some(s) = stats.get(i) {
                bn.apply_stats(s);
            }
            i += 1;
        });
    }

    // BiLSTM structural check support: swap the direction roles of every
    // bidirectional layer (weight transplant).
    pub fn swap_bilstm_directions(&mut self) {
        for layer in &mut self.recurrent {
            if let RecurrentLayer::BiLstm(fwd, bwd) = layer {
                std::mem::swap(fwd, bwd);
            }
        }
    }
}

impl PulseNet<f32> {
    /// Inference on a clip: recovered pulse at the clip's frame rate.
    pub fn forward(&self, clip: &VideoClip) -> Result<PulseSignal> {
        let out = self.forward_frames(&clip.frames)?;
        PulseSignal::new(
            out.data().iter().map(|&v| v as f64).collect(),
            clip.fps,
        )
    }

    pub fn cast_to<F: Scalar>(&self) -> PulseNet<F> {
        let mut other = PulseNet::<F>::new(self.config, 0);
        let mut src = Vec::new();
        self.for_each_param(&mut |_, t| src.push(t.cast::<F>()));
        let mut i = 0;
        other.for_each_param_mut(&mut |t| {
            *t = src[i].clone();
            i += 1;
        });
        let mut bn_src: Vec<(Vec<F>, Vec<F>)> = Vec::new();
        self.for_each_bn(&mut |bn| {
            bn_src.push((
                bn.running_mean.iter().map(|&v| crate::tensor::lit(v as f64)).collect(),
                bn.running_var.iter().map(|&v| crate::tensor::lit(v as f64)).collect(),
            ))
        });
        let mut j = 0;
        other.for_each_bn_mut(&mut |bn| {
            bn.running_mean = bn_src[j].0.clone();
            bn.running_var = bn_src[j].1.clone();
            j += 1;
        });
        other
    }
}

// ── Checkpoint format ─────────────────────────────────────────────────
// One JSON manifest line (variant kind, channels, seed, epoch, tensor
// directory) followed by concatenated tensor records in the tensor file
// format, in manifest order.

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    kind: VariantKind,
    channels: [usize; 4],
    seed: u64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

fn named_state(model: &PulseNet<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    model.for_each_param(&mut |name, t| out.push((name, t.clone())));
    let mut i = 0;
    model.for_each_bn(&mut |bn| {
        let (m, v) = bn.stats_tensors();
        out.push((format!("bnstats{i}.mean"), m));
        out.push((format!("bnstats{i}.var"), v));
        i += 1;
    });
    out
}

pub fn save_checkpoint(
    model: &PulseNet<f32>,
    meta: CheckpointMeta,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let path = path.as_ref();
    let state = named_state(model);
    let manifest = CheckpointManifest {
        format: "pulse-ckpt-v1".into(),
        kind: model.config.kind,
        channels: model.config.channels,
        seed: meta.seed,
        epoch: meta.epoch,
        tensors: state
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    // atomic: write to a temp file in the same directory, then rename
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        let mut line = serde_json::to_string(&manifest)
            .map_err(|e| Error::invalid(format!("manifest encode: {e}")))?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for (_, t) in &state {
            t.write_to(&mut w)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<(PulseNet<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format {
            path: pstr.clone(),
            reason: format!("bad checkpoint manifest: {e}"),
        })?;
    if manifest.format != "pulse-ckpt-v1" {
        return Err(Error::Format {
            path: pstr,
            reason: format!("unknown checkpoint format '{}'", manifest.format),
        });
    }
    let config = ModelConfig {
        kind: manifest.kind,
        channels: manifest.channels,
    };
    let mut model = PulseNet::<f32>::new(config, manifest.seed);
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let t = Tensor::<f32>::read_from(&mut r, &pstr)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path: pstr,
                reason: format!(
                    "tensor '{}' shape {:?} does not match manifest {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                ),
            });
        }
        tensors.push(t);
    }
    let n_params = model.param_count();
    let mut iter = tensors.into_iter();
    let mut loaded = 0usize;
    model.for_each_param_mut(&mut |t| {
        if let Some(v) = iter.next() {
            *t = v;
            loaded += 1;
        }
    });
    if loaded != n_params {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "checkpoint has fewer tensors than the model has parameters".into(),
        });
    }
    let rest: Vec<Tensor<f32>> = iter.collect();
    let mut pair = rest.chunks_exact(2);
    model.for_each_bn_mut(&mut |bn| {
        if let Some(p) = pair.next() {
            bn.set_stats_tensors(&p[0], &p[1]);
        }
    });
    Ok((
        model,
        CheckpointMeta {
            seed: manifest.seed,
            epoch: manifest.epoch,
        },
    ))
}
