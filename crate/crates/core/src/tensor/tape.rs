//! Wengert-style gradient tape.
//!
//! Forward ops append nodes holding their result and enough saved state to
//! run the pullback; `backward` replays the tape in reverse and accumulates
//! exactly one gradient per requires-grad leaf (sum over all uses).

use super::ops;
use super::ops::Triple;
use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TapeId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<E: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        input: TapeId,
    },
    Binary {
        kind: BinaryKind,
        lhs: TapeId,
        rhs: TapeId,
    },
    Scale {
        input: TapeId,
        factor: E,
    },
    Matmul {
        lhs: TapeId,
        rhs: TapeId,
    },
    Conv3d {
        input: TapeId,
        kernel: TapeId,
        bias: Option<TapeId>,
        stride: Triple,
        padding: Triple,
    },
    Deconv3d {
        input: TapeId,
        kernel: TapeId,
        bias: Option<TapeId>,
        stride: Triple,
        padding: Triple,
    },
    MaxPool3d {
        input: TapeId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: TapeId,
        gamma: TapeId,
        beta: TapeId,
        mean: Vec<E>,
        var: Vec<E>,
        eps: E,
    },
    SpatialAvgPool {
        input: TapeId,
    },
    SumAll {
        input: TapeId,
    },
    Reshape {
        input: TapeId,
    },
    Transpose2d {
        input: TapeId,
    },
    SliceRow {
        input: TapeId,
        row: usize,
    },
    StackRows {
        inputs: Vec<TapeId>,
    },
    TimeSlice {
        input: TapeId,
        t: usize,
    },
    StackTime {
        inputs: Vec<TapeId>,
    },
    ConcatCols {
        lhs: TapeId,
        rhs: TapeId,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op<E>,
}

/// Gradients produced by one `backward` call, indexed by tape id.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn wrt(&self, id: TapeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TapeId) -> Option<Tensor<E>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct GradTape<E: Scalar = f32> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Scalar> Default for GradTape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> GradTape<E> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TapeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: TapeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> TapeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        TapeId(self.nodes.len() - 1)
    }

    /// Insert a leaf. `requires_grad` leaves receive a gradient in `backward`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> TapeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient (inputs, ground truth, constants).
    pub fn constant(&mut self, value: Tensor<E>) -> TapeId {
        self.leaf(value, false)
    }

    pub fn unary(&mut self, kind: UnaryKind, input: TapeId) -> TapeId {
        let v = match kind {
            UnaryKind::Relu => ops::relu(self.value(input)),
            UnaryKind::Sigmoid => ops::sigmoid(self.value(input)),
            UnaryKind::Tanh => ops::tanh(self.value(input)),
            UnaryKind::Sqrt => ops::sqrt(self.value(input)),
        };
        let ng = self.needs_grad(input);
        self.push(v, ng, Op::Unary { kind, input })
    }

    pub fn relu(&mut self, x: TapeId) -> TapeId {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: TapeId) -> TapeId {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: TapeId) -> TapeId {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn sqrt(&mut self, x: TapeId) -> TapeId {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn binary(&mut self, kind: BinaryKind, lhs: TapeId, rhs: TapeId) -> Result<TapeId> {
        let v = match kind {
            BinaryKind::Add => ops::add(self.value(lhs), self.value(rhs))?,
            BinaryKind::Sub => ops::sub(self.value(lhs), self.value(rhs))?,
            BinaryKind::Mul => ops::mul(self.value(lhs), self.value(rhs))?,
            BinaryKind::Div => ops::div(self.value(lhs), self.value(rhs))?,
        };
        let ng = self.needs_grad(lhs) || self.needs_grad(rhs);
        Ok(self.push(v, ng, Op::Binary { kind, lhs, rhs }))
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, input: TapeId, factor: E) -> TapeId {
        let v = ops::scale(self.value(input), factor);
        let ng = self.needs_grad(input);
        self.push(v, ng, Op::Scale { input, factor })
    }

    pub fn matmul(&mut self, lhs: TapeId, rhs: TapeId) -> Result<TapeId> {
        let v = ops::matmul(self.value(lhs), self.value(rhs))?;
        let ng = self.needs_grad(lhs) || self.needs_grad(rhs);
        Ok(self.push(v, ng, Op::Matmul { lhs, rhs }))
    }

    pub fn conv3d(
        &mut self,
        input: TapeId,
        kernel: TapeId,
        bias: Option<TapeId>,
        stride: Triple,
        padding: Triple,
    ) -> Result<TapeId> {
        let v = ops::conv3d_fwd(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let ng = self.needs_grad(input)
            || self.needs_grad(kernel)
            || bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        Ok(self.push(
            v,
            ng,
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Transposed convolution. `kernel` is [Cin,Cout,kT,kH,kW]; `stride` and
    /// `padding` are in forward-convolution terms, so the output extent is
    /// s*(n-1) + k - 2p per axis.
    pub fn deconv3d(
        &mut self,
        input: TapeId,
        kernel: TapeId,
        bias: Option<TapeId>,
        stride: Triple,
        padding: Triple,
    ) -> Result<TapeId> {
        let v = deconv3d_raw(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let ng = self.needs_grad(input)
            || self.needs_grad(kernel)
            || bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        Ok(self.push(
            v,
            ng,
            Op::Deconv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn maxpool3d(&mut self, input: TapeId, kernel: Triple, stride: Triple) -> Result<TapeId> {
        let (v, argmax) = ops::maxpool3d_fwd(self.value(input), kernel, stride)?;
        let ng = self.needs_grad(input);
        Ok(self.push(v, ng, Op::MaxPool3d { input, argmax }))
    }

    /// Training-mode batch normalization: normalizes with batch statistics
    /// and returns them so the caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        input: TapeId,
        gamma: TapeId,
        beta: TapeId,
        eps: E,
    ) -> Result<(TapeId, Vec<E>, Vec<E>)> {
        let (mean, var) = ops::batch_stats(self.value(input))?;
        let v = ops::batchnorm_fwd(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            &mean,
            &var,
            eps,
        )?;
        let ng = self.needs_grad(input) || self.needs_grad(gamma) || self.needs_grad(beta);
        let id = self.push(
            v,
            ng,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
        );
        Ok((id, mean, var))
    }

    pub fn spatial_avgpool(&mut self, input: TapeId) -> Result<TapeId> {
        let v = ops::spatial_avgpool_fwd(self.value(input))?;
        let ng = self.needs_grad(input);
        Ok(self.push(v, ng, Op::SpatialAvgPool { input }))
    }

    pub fn sum(&mut self, input: TapeId) -> TapeId {
        let v = ops::sum_all(self.value(input));
        let ng = self.needs_grad(input);
        self.push(v, ng, Op::SumAll { input })
    }

    pub fn mean(&mut self, input: TapeId) -> TapeId {
        let n = self.value(input).len();
        let s = self.sum(input);
        self.scale(s, E::one() / lit::<E>(n as f64))
    }

    pub fn reshape(&mut self, input: TapeId, shape: &[usize]) -> Result<TapeId> {
        let v = self.value(input).reshape(shape)?;
        let ng = self.needs_grad(input);
        Ok(self.push(v, ng, Op::Reshape { input }))
    }

    pub fn transpose2d(&mut self, input: TapeId) -> Result<TapeId> {
        let v = ops::transpose2d(self.value(input))?;
        let ng = self.needs_grad(input);
        Ok(self.push(v, ng, Op::Transpose2d { input }))
    }

    pub fn slice_row(&mut self, input: TapeId, row: usize) -> Result<TapeId> {
        let v = ops::slice_row(self.value(input), row)?;
        let ng = self.needs_grad(input);
        Ok(self.push(v, ng, Op::SliceRow { input, row }))
    }

    pub fn stack_rows(&mut self, inputs: &[TapeId]) -> Result<TapeId> {
        let vals: Vec<&Tensor<E>> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = ops::stack_rows(&vals)?;
        let ng = inputs.iter().any(|&i| self.needs_grad(i));
        Ok(self.push(
            v,
            ng,
            Op::StackRows {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn time_slice(&mut self, input: TapeId, t: usize) -> Result<TapeId> {
        let v = ops::time_slice(self.value(input), t)?;
        let ng = self.needs_grad(input);
        Ok(self.push(v, ng, Op::TimeSlice { input, t }))
    }

    pub fn stack_time(&mut self, inputs: &[TapeId]) -> Result<TapeId> {
        let vals: Vec<&Tensor<E>> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = ops::stack_time(&vals)?;
        let ng = inputs.iter().any(|&i| self.needs_grad(i));
        Ok(self.push(
            v,
            ng,
            Op::StackTime {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, lhs: TapeId, rhs: TapeId) -> Result<TapeId> {
        let v = ops::concat_cols(self.value(lhs), self.value(rhs))?;
        let ng = self.needs_grad(lhs) || self.needs_grad(rhs);
        Ok(self.push(v, ng, Op::ConcatCols { lhs, rhs }))
    }

    /// Reverse pass from a scalar loss. A tape can only be walked once.
    pub fn backward(&mut self, loss: TapeId) -> Result<Gradients<E>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.pullback(idx, &g, &mut grads)?;
            // leaves keep their accumulated gradient
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<E>>], id: TapeId, delta: Tensor<E>) -> Result<()> {
        if !self.needs_grad(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(g) => {
                *g = ops::add(g, &delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn pullback(
        &self,
        idx: usize,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, input } => {
                let x = self.value(*input);
                let delta = match kind {
                    UnaryKind::Relu => {
                        let mut d = g.clone();
                        for (d, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                            if xv <= E::zero() {
                                *d = E::zero();
                            }
                        }
                        d
                    }
                    UnaryKind::Sigmoid => {
                        let mut d = g.clone();
                        for (d, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                            *d = *d * yv * (E::one() - yv);
                        }
                        d
                    }
                    UnaryKind::Tanh => {
                        let mut d = g.clone();
                        for (d, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                            *d = *d * (E::one() - yv * yv);
                        }
                        d
                    }
                    UnaryKind::Sqrt => {
                        let mut d = g.clone();
                        let half = lit::<E>(0.5);
                        for (d, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                            *d = *d * half / yv;
                        }
                        d
                    }
                };
                self.accum(grads, *input, delta)?;
            }
            Op::Binary { kind, lhs, rhs } => match kind {
                BinaryKind::Add => {
                    self.accum(grads, *lhs, g.clone())?;
                    self.accum(grads, *rhs, g.clone())?;
                }
                BinaryKind::Sub => {
                    self.accum(grads, *lhs, g.clone())?;
                    self.accum(grads, *rhs, ops::scale(g, -E::one()))?;
                }
                BinaryKind::Mul => {
                    self.accum(grads, *lhs, ops::mul(g, self.value(*rhs))?)?;
                    self.accum(grads, *rhs, ops::mul(g, self.value(*lhs))?)?;
                }
                BinaryKind::Div => {
                    let b = self.value(*rhs);
                    self.accum(grads, *lhs, ops::div(g, b)?)?;
                    // d/db (a/b) = -y/b
                    let gb = ops::scale(&ops::div(&ops::mul(g, y)?, b)?, -E::one());
                    self.accum(grads, *rhs, gb)?;
                }
            },
            Op::Scale { input, factor } => {
                self.accum(grads, *input, ops::scale(g, *factor))?;
            }
            Op::Matmul { lhs, rhs } => {
                self.accum(grads, *lhs, ops::matmul_nt(g, self.value(*rhs))?)?;
                self.accum(grads, *rhs, ops::matmul_tn(self.value(*lhs), g)?)?;
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                if self.needs_grad(*input) {
                    let gin = ops::conv3d_bwd_data(
                        g,
                        self.value(*kernel),
                        *stride,
                        *padding,
                        self.value(*input).shape(),
                    )?;
                    self.accum(grads, *input, gin)?;
                }
                if self.needs_grad(*kernel) {
                    let gk = ops::conv3d_bwd_kernel(
                        self.value(*input),
                        g,
                        self.value(*kernel).shape(),
                        *stride,
                        *padding,
                    )?;
                    self.accum(grads, *kernel, gk)?;
                }
                if let Some(b) = bias {
                    if self.needs_grad(*b) {
                        self.accum(grads, *b, ops::conv3d_bwd_bias(g))?;
                    }
                }
            }
            Op::Deconv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let kc = deconv_kernel_view(self.value(*kernel))?;
                if self.needs_grad(*input) {
                    let gin = ops::conv3d_fwd(g, &kc, None, *stride, *padding)?;
                    self.accum(grads, *input, gin)?;
                }
                if self.needs_grad(*kernel) {
                    let gk = ops::conv3d_bwd_kernel(
                        g,
                        self.value(*input),
                        kc.shape(),
                        *stride,
                        *padding,
                    )?;
                    // gk is in [Cin,Cout,...] layout already (conv view)
                    self.accum(grads, *kernel, gk.reshape(self.value(*kernel).shape())?)?;
                }
                if let Some(b) = bias {
                    if self.needs_grad(*b) {
                        self.accum(grads, *b, ops::conv3d_bwd_bias(g))?;
                    }
                }
            }
            Op::MaxPool3d { input, argmax } => {
                let gin = ops::maxpool3d_bwd(g, argmax, self.value(*input).shape());
                self.accum(grads, *input, gin)?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (gin, dgamma, dbeta) = ops::batchnorm_bwd(
                    self.value(*input),
                    self.value(*gamma),
                    mean,
                    var,
                    *eps,
                    g,
                )?;
                self.accum(grads, *input, gin)?;
                self.accum(grads, *gamma, dgamma)?;
                self.accum(grads, *beta, dbeta)?;
            }
            Op::SpatialAvgPool { input } => {
                let gin = ops::spatial_avgpool_bwd(g, self.value(*input).shape());
                self.accum(grads, *input, gin)?;
            }
            Op::SumAll { input } => {
                let gin = Tensor::full(self.value(*input).shape(), g.item());
                self.accum(grads, *input, gin)?;
            }
            Op::Reshape { input } => {
                self.accum(grads, *input, g.reshape(self.value(*input).shape())?)?;
            }
            Op::Transpose2d { input } => {
                self.accum(grads, *input, ops::transpose2d(g)?)?;
            }
            Op::SliceRow { input, row } => {
                let mut gin = Tensor::zeros(self.value(*input).shape());
                let c = gin.shape()[1];
                gin.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.data());
                self.accum(grads, *input, gin)?;
            }
            Op::StackRows { inputs } => {
                for (i, id) in inputs.iter().enumerate() {
                    if self.needs_grad(*id) {
                        self.accum(grads, *id, ops::slice_row(g, i)?)?;
                    }
                }
            }
            Op::TimeSlice { input, t } => {
                let mut gin = Tensor::zeros(self.value(*input).shape());
                ops::time_slice_bwd_into(&mut gin, g, *t);
                self.accum(grads, *input, gin)?;
            }
            Op::StackTime { inputs } => {
                for (t, id) in inputs.iter().enumerate() {
                    if self.needs_grad(*id) {
                        self.accum(grads, *id, ops::time_slice(g, t)?)?;
                    }
                }
            }
            Op::ConcatCols { lhs, rhs } => {
                let (r, c1) = {
                    let s = self.value(*lhs).shape();
                    (s[0], s[1])
                };
                let c2 = self.value(*rhs).shape()[1];
                let mut ga = Tensor::zeros(&[r, c1]);
                let mut gb = Tensor::zeros(&[r, c2]);
                for i in 0..r {
                    ga.data_mut()[i * c1..(i + 1) * c1]
                        .copy_from_slice(&g.data()[i * (c1 + c2)..i * (c1 + c2) + c1]);
                    gb.data_mut()[i * c2..(i + 1) * c2]
                        .copy_from_slice(&g.data()[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)]);
                }
                self.accum(grads, *lhs, ga)?;
                self.accum(grads, *rhs, gb)?;
            }
        }
        Ok(())
    }
}

/// Raw transposed convolution, shared by the tape op and the inference path.
pub fn deconv3d_raw<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: Triple,
    padding: Triple,
) -> Result<Tensor<E>> {
    let kc = deconv_kernel_view(kernel)?;
    let si = input.shape();
    let sk = kc.shape();
    if si.len() != 4 || si[0] != sk[0] {
        return Err(Error::ShapeMismatch {
            context: "deconv3d",
            lhs: si.to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let out_extent = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        let v = s * (n - 1) + k;
        if v < 2 * p {
            return Err(Error::invalid("deconv padding exceeds output extent"));
        }
        Ok(v - 2 * p)
    };
    let out_shape = vec![
        sk[1],
        out_extent(si[1], sk[2], stride.0, padding.0)?,
        out_extent(si[2], sk[3], stride.1, padding.1)?,
        out_extent(si[3], sk[4], stride.2, padding.2)?,
    ];
    let mut out = ops::conv3d_bwd_data(input, &kc, stride, padding, &out_shape)?;
    if let Some(b) = bias {
        if b.len() != out_shape[0] {
            return Err(Error::ShapeMismatch {
                context: "deconv3d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![out_shape[0]],
            });
        }
        let per: usize = out_shape[1..].iter().product();
        for c in 0..out_shape[0] {
            let bv = b.data()[c];
            for x in &mut out.data_mut()[c * per..(c + 1) * per] {
                *x = *x + bv;
            }
        }
    }
    Ok(out)
}

/// A deconv kernel [Cin,Cout,kT,kH,kW] reinterpreted as a conv kernel
/// [Co=Cin,Ci=Cout,kT,kH,kW]; same memory, different role.
fn deconv_kernel_view<E: Scalar>(kernel: &Tensor<E>) -> Result<Tensor<E>> {
    if kernel.shape().len() != 5 {
        return Err(Error::invalid(format!(
            "deconv kernel must be 5-d, got {:?}",
            kernel.shape()
        )));
    }
    Ok(kernel.clone())
}
