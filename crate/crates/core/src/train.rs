//! Training: negative-Pearson and MSE losses on the tape, Adam, and the
//! epoch loop with per-epoch checkpoints.

use crate::error::{Error, Result};
use crate::models::{save_checkpoint, CheckpointMeta, PulseNet, VideoClip};
use crate::nn::BnStats;
use crate::pulse::{znormalize, PulseSignal};
use crate::tensor::tape::{GradTape, TapeId};
use crate::tensor::{lit, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// Guard against a numerically degenerate Pearson denominator.
const PEARSON_DEN_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    NegPea,
    Mse,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negpea" => Ok(LossKind::NegPea),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::invalid(format!(
                "unknown loss '{other}' (expected negpea or mse)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::NegPea => "negpea",
            LossKind::Mse => "mse",
        })
    }
}

/// 1 - r between two equal-length vectors, on the tape:
/// r = (T*Sxy - Sx*Sy) / sqrt((T*Sxx - Sx^2)(T*Syy - Sy^2)).
/// Range [0, 2]; errors if either side has (numerically) zero variance.
pub fn neg_pearson_loss<E: Scalar>(
    tape: &mut GradTape<E>,
    pred: TapeId,
    target: TapeId,
) -> Result<TapeId> {
    let n = tape.value(pred).len();
    if tape.value(target).len() != n {
        return Err(Error::ShapeMismatch {
            context: "neg_pearson_loss",
            lhs: tape.value(pred).shape().to_vec(),
            rhs: tape.value(target).shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(Error::invalid("pearson needs at least 2 samples"));
    }
    let t = lit::<E>(n as f64);
    let sx = tape.sum(pred);
    let sy = tape.sum(target);
    let xy = tape.mul(pred, target)?;
    let sxy = tape.sum(xy);
    let xx = tape.mul(pred, pred)?;
    let sxx = tape.sum(xx);
    let yy = tape.mul(target, target)?;
    let syy = tape.sum(yy);

    let t_sxy = tape.scale(sxy, t);
    let sx_sy = tape.mul(sx, sy)?;
    let num = tape.sub(t_sxy, sx_sy)?;

    let t_sxx = tape.scale(sxx, t);
    let sx2 = tape.mul(sx, sx)?;
    let dx = tape.sub(t_sxx, sx2)?;
    let t_syy = tape.scale(syy, t);
    let sy2 = tape.mul(sy, sy)?;
    let dy = tape.sub(t_syy, sy2)?;

    let dd = tape.mul(dx, dy)?;
    if tape.value(dd).item().to_f64().unwrap() < PEARSON_DEN_MIN {
        return Err(Error::DegenerateSignal(
            "pearson denominator vanishes (constant signal)".into(),
        ));
    }
    let den = tape.sqrt(dd);
    let r = tape.div(num, den)?;
    let one = tape.constant(Tensor::scalar(E::one()));
    tape.sub(one, r)
}

/// Mean squared error between two equal-length vectors, on the tape.
pub fn mse_loss<E: Scalar>(
    tape: &mut GradTape<E>,
    pred: TapeId,
    target: TapeId,
) -> Result<TapeId> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

pub fn loss_on_tape<E: Scalar>(
    kind: LossKind,
    tape: &mut GradTape<E>,
    pred: TapeId,
    target: TapeId,
) -> Result<TapeId> {
    match kind {
        LossKind::NegPea => neg_pearson_loss(tape, pred, target),
        LossKind::Mse => mse_loss(tape, pred, target),
    }
}

// ── Adam ──────────────────────────────────────────────────────────────

/// Adam with bias correction; one `(m, v)` slot per parameter tensor,
/// addressed by index so the caller can iterate parameters in any stable
/// order.
#[derive(Clone, Debug)]
pub struct Adam<E: Scalar> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    t: u32,
    state: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: lit(lr),
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
            t: 0,
            state: Vec::new(),
        }
    }

    /// Advance the global step counter; call once before updating all
    /// parameters of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, idx: usize, param: &mut Tensor<E>, grad: &Tensor<E>) {
        debug_assert!(self.t > 0, "begin_step before update");
        debug_assert_eq!(param.shape(), grad.shape());
        while self.state.len() <= idx {
            self.state.push((Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.state[idx];
        if m.is_empty() {
            m.resize(param.len(), E::zero());
            v.resize(param.len(), E::zero());
        }
        let one = E::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (one - self.beta1) * *g;
            *vi = self.beta2 * *vi + (one - self.beta2) * *g * *g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ── Training loop ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional global L2 gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::NegPea,
            epochs: 15,
            lr: 1e-4,
            batch_size: 4,
            seed: 0,
            grad_clip: None,
        }
    }
}

/// One supervised example: a clip and its reference wave sampled at the
/// clip's frame times (same length as the clip).
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub clip: VideoClip,
    pub target: PulseSignal,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    /// CSV with header `epoch,mean_loss`; epochs are 1-based.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,mean_loss")?;
        for (i, l) in self.epoch_losses.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, l)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)
    }
}

fn averaged_stats(per_clip: &[Vec<BnStats<f32>>]) -> Vec<BnStats<f32>> {
    if per_clip.is_empty() {
        return Vec::new();
    }
    let k = per_clip.len() as f32;
    let mut out = per_clip[0].clone();
    for clip_stats in &per_clip[1..] {
        for (acc, s) in out.iter_mut().zip(clip_stats) {
            for (a, b) in acc.mean.iter_mut().zip(&s.mean) {
                *a += b;
            }
            for (a, b) in acc.var.iter_mut().zip(&s.var) {
                *a += b;
            }
        }
    }
    for s in &mut out {
        s.mean.iter_mut().for_each(|v| *v /= k);
        s.var.iter_mut().for_each(|v| *v /= k);
    }
    out
}

/// Train in place. Targets are z-normalized internally. `progress` receives
/// `(epoch_index, mean_loss)` after each epoch. With a checkpoint directory,
/// `epoch_NNN.ckpt` is written after every epoch.
pub fn train(
    model: &mut PulseNet<f32>,
    data: &[TrainExample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be >= 1"));
    }
    // validate and pre-normalize targets once
    let mut targets: Vec<Tensor<f32>> = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        model.validate_input(ex.clip.frames.shape())?;
        if ex.target.len() != ex.clip.temporal_len() {
            return Err(Error::invalid(format!(
                "example {i}: target length {} != clip length {}",
                ex.target.len(),
                ex.clip.temporal_len()
            )));
        }
        let z = znormalize(&ex.target)?;
        targets.push(Tensor::from_vec(
            z.samples.iter().map(|&v| v as f32).collect(),
        ));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<f32>::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;

        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let mut grad_acc: Vec<Tensor<f32>> = Vec::new();
            let mut batch_stats: Vec<Vec<BnStats<f32>>> = Vec::new();

            for &i in batch {
                let mut tape = GradTape::new();
                let (out, params, stats) = model.forward_train(&mut tape, &data[i].clip.frames)?;
                let target = tape.constant(targets[i].clone());
                let loss = loss_on_tape(cfg.loss, &mut tape, out, target)?;
                let lv = tape.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged on example {i} in epoch {epoch}"
                    )));
                }
                epoch_loss += lv;
                let mut grads = tape.backward(loss)?;
                if grad_acc.is_empty() {
                    for &pid in &params {
                        let g = grads
                            .take(pid)
                            .unwrap_or_else(|| Tensor::zeros(&[1]));
                        grad_acc.push(g.map(|x| x * scale));
                    }
                } else {
                    for (acc, &pid) in grad_acc.iter_mut().zip(&params) {
                        if let Some(g) = grads.take(pid) {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b * scale;
                            }
                        }
                    }
                }
                batch_stats.push(stats);
            }

            if let Some(clip) = cfg.grad_clip {
                let norm: f64 = grad_acc
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let k = (clip / norm) as f32;
                    for g in &mut grad_acc {
                        g.data_mut().iter_mut().for_each(|v| *v *= k);
                    }
                }
            }

            adam.begin_step();
            let mut idx = 0;
            model.for_each_param_mut(&mut |p| {
                adam.update(idx, p, &grad_acc[idx]);
                idx += 1;
            });
            model.update_running_stats(&averaged_stats(&batch_stats));
        }

        let mean_loss = epoch_loss / data.len() as f64;
        report.epoch_losses.push(mean_loss);
        progress(epoch, mean_loss);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(
                model,
                CheckpointMeta {
                    seed: cfg.seed,
                    epoch: epoch + 1,
                },
                dir.join(format!("epoch_{:03}.ckpt", epoch + 1)),
            )?;
        }
    }
    Ok(report)
}
