//! Raw forward/backward kernels on plain tensors.
//!
//! These are the single source of truth for numerics: the tape ops and the
//! inference paths both call into here. Inner loops run over the contiguous
//! trailing axis so the compiler can vectorize them.

use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

pub type Triple = (usize, usize, usize);

#[inline]
fn axpy<E: Scalar>(a: E, x: &[E], y: &mut [E]) {
    debug_assert_eq!(x.len(), y.len());
    for (y, &x) in y.iter_mut().zip(x) {
        *y = a.mul_add(x, *y);
    }
}

// Eight independent accumulator lanes so the FMA chains pipeline and the
// loop vectorizes; summation order is fixed, so results stay deterministic.
#[inline]
fn dot<E: Scalar>(x: &[E], y: &[E]) -> E {
    debug_assert_eq!(x.len(), y.len());
    const LANES: usize = 8;
    let mut acc = [E::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xb, yb) in xc.zip(yc) {
        for j in 0..LANES {
            acc[j] = xb[j].mul_add(yb[j], acc[j]);
        }
    }
    let mut s = E::zero();
    for a in acc {
        s = s + a;
    }
    for (&x, &y) in xr.iter().zip(yr) {
        s = x.mul_add(y, s);
    }
    s
}

// Fused 3-tap row correlation for the ubiquitous kw=3, pw=1 case:
// acc[i] += k[0]*x[i-1] + k[1]*x[i] + k[2]*x[i+1], edges truncated.
// One pass instead of three axpy calls.
#[inline]
fn conv_row3<E: Scalar>(k0: E, k1: E, k2: E, x: &[E], acc: &mut [E]) {
    let w = acc.len();
    debug_assert_eq!(x.len(), w);
    if w == 1 {
        acc[0] = k1.mul_add(x[0], acc[0]);
        return;
    }
    acc[0] = k2.mul_add(x[1], k1.mul_add(x[0], acc[0]));
    // explicit 8-lane blocks: short rows never reach the compiler's own
    // 32-element vector threshold, so hand it vectorizable chunks
    const LANES: usize = 8;
    let mut i = 1;
    while i + LANES <= w - 1 {
        let xs = &x[i - 1..i + LANES + 1];
        let a = &mut acc[i..i + LANES];
        for j in 0..LANES {
            a[j] = k2.mul_add(xs[j + 2], k1.mul_add(xs[j + 1], k0.mul_add(xs[j], a[j])));
        }
        i += LANES;
    }
    while i < w - 1 {
        acc[i] = k2.mul_add(x[i + 1], k1.mul_add(x[i], k0.mul_add(x[i - 1], acc[i])));
        i += 1;
    }
    acc[w - 1] = k1.mul_add(x[w - 1], k0.mul_add(x[w - 2], acc[w - 1]));
}

// Companion to `conv_row3` for the kernel gradient: accumulate the three
// shifted row correlations acc[dw] += sum_ow g[ow]*x[ow+dw-1] into 8
// independent lanes each (reduced by the caller).
#[inline]
fn corr3_acc<E: Scalar>(g: &[E], x: &[E], acc: &mut [[E; 8]; 3]) {
    let w = g.len();
    debug_assert_eq!(x.len(), w);
    if w == 1 {
        acc[1][0] = g[0].mul_add(x[0], acc[1][0]);
        return;
    }
    acc[1][0] = g[0].mul_add(x[0], acc[1][0]);
    acc[2][0] = g[0].mul_add(x[1], acc[2][0]);
    acc[0][0] = g[w - 1].mul_add(x[w - 2], acc[0][0]);
    acc[1][0] = g[w - 1].mul_add(x[w - 1], acc[1][0]);
    let mut i = 1;
    while i + 8 <= w - 1 {
        let gs = &g[i..i + 8];
        let xs = &x[i - 1..i + 9];
        for j in 0..8 {
            acc[0][j] = gs[j].mul_add(xs[j], acc[0][j]);
            acc[1][j] = gs[j].mul_add(xs[j + 1], acc[1][j]);
            acc[2][j] = gs[j].mul_add(xs[j + 2], acc[2][j]);
        }
        i += 8;
    }
    while i < w - 1 {
        acc[0][0] = g[i].mul_add(x[i - 1], acc[0][0]);
        acc[1][0] = g[i].mul_add(x[i], acc[1][0]);
        acc[2][0] = g[i].mul_add(x[i + 1], acc[2][0]);
        i += 1;
    }
}

fn check_same_shape<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    context: &'static str,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ── Elementwise ───────────────────────────────────────────────────────

macro_rules! binary_op {
    ($name:ident, $ctx:literal, $f:expr) => {
        pub fn $name<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
            check_same_shape(a, b, $ctx)?;
            let f = $f;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
    };
}

binary_op!(add, "add", |x: E, y: E| x + y);
binary_op!(sub, "sub", |x: E, y: E| x - y);
binary_op!(mul, "mul", |x: E, y: E| x * y);
binary_op!(div, "div", |x: E, y: E| x / y);

pub fn relu<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    a.map(|x| if x > E::zero() { x } else { E::zero() })
}

pub fn sigmoid<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    a.map(|x| E::one() / (E::one() + (-x).exp()))
}

pub fn tanh<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    a.map(|x| x.tanh())
}

pub fn sqrt<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    a.map(|x| x.sqrt())
}

pub fn scale<E: Scalar>(a: &Tensor<E>, factor: E) -> Tensor<E> {
    a.map(|x| x * factor)
}

pub fn sum_all<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    Tensor::scalar(a.data().iter().copied().sum())
}

// ── Matrix multiply ───────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b.data()[p * n..(p + 1) * n], crow);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C[m,k] = A[m,n] * B[k,n]^T
pub fn matmul_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::ShapeMismatch {
            context: "matmul_nt",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, n, k) = (sa[0], sa[1], sb[0]);
    let mut out = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a.data()[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(arow, &b.data()[p * n..(p + 1) * n]);
        }
    }
    Tensor::new(vec![m, k], out)
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::ShapeMismatch {
            context: "matmul_tn",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let brow = &b.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            axpy(av, brow, &mut out[p * n..(p + 1) * n]);
        }
    }
    Tensor::new(vec![k, n], out)
}

pub fn transpose2d<E: Scalar>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("transpose2d on shape {s:?}")));
    }
    let (r, c) = (s[0], s[1]);
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

// ── 3-D convolution (cross-correlation) ───────────────────────────────

fn conv_out_extent(input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = input + 2 * p;
    if padded < k {
        return Err(Error::invalid(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Cross-correlation of `input` [Ci,T,H,W] with `kernel` [Co,Ci,kT,kH,kW].
pub fn conv3d_fwd<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: Triple,
    padding: Triple,
) -> Result<Tensor<E>> {
    let si = input.shape();
    let sk = kernel.shape();
    if si.len() != 4 || sk.len() != 5 || si[0] != sk[1] {
        return Err(Error::ShapeMismatch {
            context: "conv3d",
            lhs: si.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let (ci, t, h, w) = (si[0], si[1], si[2], si[3]);
    let (co, kt, kh, kw) = (sk[0], sk[2], sk[3], sk[4]);
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;
    let td = conv_out_extent(t, kt, st, pt)?;
    let hd = conv_out_extent(h, kh, sh, ph)?;
    let wd = conv_out_extent(w, kw, sw, pw)?;
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::ShapeMismatch {
                context: "conv3d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![co],
            });
        }
    }

    let mut out = vec![E::zero(); co * td * hd * wd];
    let in_d = input.data();
    let k_d = kernel.data();

    if stride == (1, 1, 1) {
        // row-accumulator fast path: each output row is built in a cache-hot
        // stack buffer, so the only streaming traffic is the input rows
        let mut acc = vec![E::zero(); wd];
        for oc in 0..co {
            let bv = bias.map(|b| b.data()[oc]).unwrap_or_else(E::zero);
            let out_c = &mut out[oc * td * hd * wd..(oc + 1) * td * hd * wd];
            for ot in 0..td {
                for oh in 0..hd {
                    acc.iter_mut().for_each(|v| *v = bv);
                    for ic in 0..ci {
                        let in_c = &in_d[ic * t * h * w..(ic + 1) * t * h * w];
                        let k_block = &k_d[(oc * ci + ic) * kt * kh * kw..][..kt * kh * kw];
                        for dt in 0..kt {
                            let it = (ot + dt) as isize - pt as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            let it = it as usize;
                            for dh in 0..kh {
                                let ih = (oh + dh) as isize - ph as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let ih = ih as usize;
                                let in_row = &in_c[(it * h + ih) * w..][..w];
                                let k_row = &k_block[(dt * kh + dh) * kw..][..kw];
                                if kw == 3 && pw == 1 && wd == w {
                                    conv_row3(k_row[0], k_row[1], k_row[2], in_row, &mut acc);
                                } else {
                                    for (dw, &kv) in k_row.iter().enumerate() {
                                        let lo = pw.saturating_sub(dw);
                                        let hi = (w + pw - dw).min(wd);
                                        if lo < hi {
                                            axpy(kv, &in_row[lo + dw - pw..hi + dw - pw], &mut acc[lo..hi]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out_c[(ot * hd + oh) * wd..(ot * hd + oh + 1) * wd].copy_from_slice(&acc);
                }
            }
        }
        return Tensor::new(vec![co, td, hd, wd], out);
    }

    for oc in 0..co {
        let out_c = &mut out[oc * td * hd * wd..(oc + 1) * td * hd * wd];
        if let Some(b) = bias {
            let bv = b.data()[oc];
            out_c.iter_mut().for_each(|v| *v = bv);
        }
        for ic in 0..ci {
            let in_c = &in_d[ic * t * h * w..(ic + 1) * t * h * w];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let kv = k_d[(((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw];
                        for ot in 0..td {
                            let it = (ot * st + dt) as isize - pt as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            let it = it as usize;
                            for oh in 0..hd {
                                let ih = (oh * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let ih = ih as usize;
                                let in_row = &in_c[(it * h + ih) * w..(it * h + ih + 1) * w];
                                let out_row =
                                    &mut out_c[(ot * hd + oh) * wd..(ot * hd + oh + 1) * wd];
                                if sw == 1 {
                                    // iw = ow + dw - pw; clamp ow to the valid range
                                    let lo = pw.saturating_sub(dw);
                                    let hi = (w + pw - dw).min(wd);
                                    if lo < hi {
                                        axpy(
                                            kv,
                                            &in_row[lo + dw - pw..hi + dw - pw],
                                            &mut out_row[lo..hi],
                                        );
                                    }
                                } else {
                                    for ow in 0..wd {
                                        let iw = (ow * sw + dw) as isize - pw as isize;
                                        if iw >= 0 && (iw as usize) < w {
                                            out_row[ow] =
                                                kv.mul_add(in_row[iw as usize], out_row[ow]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, td, hd, wd], out)
}

/// Gradient of conv3d w.r.t. its input (also the forward pass of deconv3d).
pub fn conv3d_bwd_data<E: Scalar>(
    gout: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: Triple,
    padding: Triple,
    in_shape: &[usize],
) -> Result<Tensor<E>> {
    let sg = gout.shape();
    let sk = kernel.shape();
    if sg.len() != 4 || sk.len() != 5 || sg[0] != sk[0] || in_shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "conv3d_bwd_data",
            lhs: sg.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let (ci, t, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (co, kt, kh, kw) = (sk[0], sk[2], sk[3], sk[4]);
    if ci != sk[1] {
        return Err(Error::ShapeMismatch {
            context: "conv3d_bwd_data channels",
            lhs: in_shape.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;
    let (td, hd, wd) = (sg[1], sg[2], sg[3]);

    let mut gin = vec![E::zero(); ci * t * h * w];
    let g_d = gout.data();
    let k_d = kernel.data();

    if stride == (1, 1, 1) {
        // mirror of the forward fast path, accumulating one input-gradient
        // row at a time
        let mut acc = vec![E::zero(); w];
        for ic in 0..ci {
            let gin_c = &mut gin[ic * t * h * w..(ic + 1) * t * h * w];
            for it in 0..t {
                for ih in 0..h {
                    acc.iter_mut().for_each(|v| *v = E::zero());
                    for oc in 0..co {
                        let g_c = &g_d[oc * td * hd * wd..(oc + 1) * td * hd * wd];
                        let k_block = &k_d[(oc * ci + ic) * kt * kh * kw..][..kt * kh * kw];
                        for dt in 0..kt {
                            let ot = (it + pt) as isize - dt as isize;
                            if ot < 0 || ot as usize >= td {
                                continue;
                            }
                            let ot = ot as usize;
                            for dh in 0..kh {
                                let oh = (ih + ph) as isize - dh as isize;
                                if oh < 0 || oh as usize >= hd {
                                    continue;
                                }
                                let oh = oh as usize;
                                let g_row = &g_c[(ot * hd + oh) * wd..][..wd];
                                let k_row = &k_block[(dt * kh + dh) * kw..][..kw];
                                if kw == 3 && pw == 1 && wd == w {
                                    // adjoint of the forward 3-tap: reversed kernel
                                    conv_row3(k_row[2], k_row[1], k_row[0], g_row, &mut acc);
                                } else {
                                    for (dw, &kv) in k_row.iter().enumerate() {
                                        // iw = ow + dw - pw with ow in [0,wd), iw in [0,w)
                                        let lo_iw = dw.saturating_sub(pw);
                                        let hi_iw = (wd + dw).saturating_sub(pw).min(w);
                                        if lo_iw < hi_iw {
                                            axpy(
                                                kv,
                                                &g_row[lo_iw + pw - dw..hi_iw + pw - dw],
                                                &mut acc[lo_iw..hi_iw],
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                    gin_c[(it * h + ih) * w..(it * h + ih + 1) * w].copy_from_slice(&acc);
                }
            }
        }
        return Tensor::new(in_shape.to_vec(), gin);
    }

    for oc in 0..co {
        let g_c = &g_d[oc * td * hd * wd..(oc + 1) * td * hd * wd];
        for ic in 0..ci {
            let gin_c = &mut gin[ic * t * h * w..(ic + 1) * t * h * w];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let kv = k_d[(((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw];
                        for ot in 0..td {
                            let it = (ot * st + dt) as isize - pt as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            let it = it as usize;
                            for oh in 0..hd {
                                let ih = (oh * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let ih = ih as usize;
                                let g_row = &g_c[(ot * hd + oh) * wd..(ot * hd + oh + 1) * wd];
                                let gin_row =
                                    &mut gin_c[(it * h + ih) * w..(it * h + ih + 1) * w];
                                if sw == 1 {
                                    let lo = pw.saturating_sub(dw);
                                    let hi = (w + pw - dw).min(wd);
                                    if lo < hi {
                                        axpy(
                                            kv,
                                            &g_row[lo..hi],
                                            &mut gin_row[lo + dw - pw..hi + dw - pw],
                                        );
                                    }
                                } else {
                                    for ow in 0..wd {
                                        let iw = (ow * sw + dw) as isize - pw as isize;
                                        if iw >= 0 && (iw as usize) < w {
                                            gin_row[iw as usize] =
                                                kv.mul_add(g_row[ow], gin_row[iw as usize]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gin)
}

/// Gradient of conv3d w.r.t. its kernel.
pub fn conv3d_bwd_kernel<E: Scalar>(
    input: &Tensor<E>,
    gout: &Tensor<E>,
    kernel_shape: &[usize],
    stride: Triple,
    padding: Triple,
) -> Result<Tensor<E>> {
    let si = input.shape();
    let sg = gout.shape();
    let (ci, t, h, w) = (si[0], si[1], si[2], si[3]);
    let (co, kt, kh, kw) = (
        kernel_shape[0],
        kernel_shape[2],
        kernel_shape[3],
        kernel_shape[4],
    );
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;
    let (td, hd, wd) = (sg[1], sg[2], sg[3]);

    let mut gk = vec![E::zero(); kernel_shape.iter().product()];
    let in_d = input.data();
    let g_d = gout.data();
    for oc in 0..co {
        let g_c = &g_d[oc * td * hd * wd..(oc + 1) * td * hd * wd];
        for ic in 0..ci {
            let in_c = &in_d[ic * t * h * w..(ic + 1) * t * h * w];
            for dt in 0..kt {
                for dh in 0..kh {
                    if (st, sh, sw) == (1, 1, 1) && kw == 3 && pw == 1 && wd == w {
                        // fused 3-tap path: one pass over the rows fills all
                        // three kw slots
                        let mut acc3 = [[E::zero(); 8]; 3];
                        for ot in 0..td {
                            let it = (ot + dt) as isize - pt as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            let it = it as usize;
                            for oh in 0..hd {
                                let ih = (oh + dh) as isize - ph as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let ih = ih as usize;
                                corr3_acc(
                                    &g_c[(ot * hd + oh) * wd..(ot * hd + oh + 1) * wd],
                                    &in_c[(it * h + ih) * w..(it * h + ih + 1) * w],
                                    &mut acc3,
                                );
                            }
                        }
                        for (dw, lanes) in acc3.iter().enumerate() {
                            let mut s = E::zero();
                            for &l in lanes {
                                s = s + l;
                            }
                            gk[(((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw] = s;
                        }
                        continue;
                    }
                    for dw in 0..kw {
                        let mut acc = E::zero();
                        for ot in 0..td {
                            let it = (ot * st + dt) as isize - pt as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            let it = it as usize;
                            for oh in 0..hd {
                                let ih = (oh * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let ih = ih as usize;
                                let g_row = &g_c[(ot * hd + oh) * wd..(ot * hd + oh + 1) * wd];
                                let in_row = &in_c[(it * h + ih) * w..(it * h + ih + 1) * w];
                                if sw == 1 {
                                    let lo = pw.saturating_sub(dw);
                                    let hi = (w + pw - dw).min(wd);
                                    if lo < hi {
                                        acc = acc
                                            + dot(
                                                &g_row[lo..hi],
                                                &in_row[lo + dw - pw..hi + dw - pw],
                                            );
                                    }
                                } else {
                                    for ow in 0..wd {
                                        let iw = (ow * sw + dw) as isize - pw as isize;
                                        if iw >= 0 && (iw as usize) < w {
                                            acc = g_row[ow].mul_add(in_row[iw as usize], acc);
                                        }
                                    }
                                }
                            }
                        }
                        gk[(((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), gk)
}

/// Per-output-channel sum of the output gradient.
pub fn conv3d_bwd_bias<E: Scalar>(gout: &Tensor<E>) -> Tensor<E> {
    let sg = gout.shape();
    let co = sg[0];
    let per = sg[1..].iter().product::<usize>();
    let data = (0..co)
        .map(|c| gout.data()[c * per..(c + 1) * per].iter().copied().sum())
        .collect();
    Tensor::from_vec(data)
}

// ── Max pooling ───────────────────────────────────────────────────────

/// Windowed max over [C,T,H,W], no padding. Ties keep the first element in
/// scan order. Returns the output and the flat input argmax per output cell.
pub fn maxpool3d_fwd<E: Scalar>(
    input: &Tensor<E>,
    kernel: Triple,
    stride: Triple,
) -> Result<(Tensor<E>, Vec<u32>)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("maxpool3d on shape {s:?}")));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (kt, kh, kw) = kernel;
    let (st, sh, sw) = stride;
    if kt > t || kh > h || kw > w {
        return Err(Error::invalid(format!(
            "pool kernel {kernel:?} exceeds input extents {s:?}"
        )));
    }
    let td = (t - kt) / st + 1;
    let hd = (h - kh) / sh + 1;
    let wd = (w - kw) / sw + 1;
    let mut out = Vec::with_capacity(c * td * hd * wd);
    let mut arg = Vec::with_capacity(c * td * hd * wd);
    let d = input.data();
    for ic in 0..c {
        for ot in 0..td {
            for oh in 0..hd {
                for ow in 0..wd {
                    let mut best = E::neg_infinity();
                    let mut best_idx = 0usize;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let idx = ((ic * t + ot * st + dt) * h + oh * sh + dh) * w
                                    + ow * sw
                                    + dw;
                                if d[idx] > best {
                                    best = d[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, td, hd, wd], out)?, arg))
}

pub fn maxpool3d_bwd<E: Scalar>(
    gout: &Tensor<E>,
    argmax: &[u32],
    in_shape: &[usize],
) -> Tensor<E> {
    let mut gin = Tensor::zeros(in_shape);
    let g = gin.data_mut();
    for (gv, &idx) in gout.data().iter().zip(argmax) {
        g[idx as usize] = g[idx as usize] + *gv;
    }
    gin
}

// ── Batch normalization ───────────────────────────────────────────────
// Input layout [N,C,...]: channel axis 1, statistics over N and all
// trailing axes. Variance is biased (divisor = count).

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(format!("batchnorm needs [N,C,...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn batch_stats<E: Scalar>(input: &Tensor<E>) -> Result<(Vec<E>, Vec<E>)> {
    let (n, c, m) = channel_layout(input.shape())?;
    let count = lit::<E>((n * m) as f64);
    let d = input.data();
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut s = E::zero();
        let mut s2 = E::zero();
        for b in 0..n {
            let base = (b * c + ch) * m;
            for &x in &d[base..base + m] {
                s = s + x;
                s2 = x.mul_add(x, s2);
            }
        }
        let mu = s / count;
        mean[ch] = mu;
        var[ch] = (s2 / count - mu * mu).max(E::zero());
    }
    Ok((mean, var))
}

/// Normalize with the given per-channel statistics, then scale/shift.
pub fn batchnorm_fwd<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &[E],
    var: &[E],
    eps: E,
) -> Result<Tensor<E>> {
    let (n, c, m) = channel_layout(input.shape())?;
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::ShapeMismatch {
            context: "batchnorm channels",
            lhs: input.shape().to_vec(),
            rhs: vec![gamma.len()],
        });
    }
    let mut out = input.data().to_vec();
    for ch in 0..c {
        let inv = E::one() / (var[ch] + eps).sqrt();
        let g = gamma.data()[ch] * inv;
        let b = beta.data()[ch] - gamma.data()[ch] * mean[ch] * inv;
        for bn in 0..n {
            let base = (bn * c + ch) * m;
            for x in &mut out[base..base + m] {
                *x = g.mul_add(*x, b);
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Training-mode backward: batch statistics are functions of the input.
pub fn batchnorm_bwd<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    mean: &[E],
    var: &[E],
    eps: E,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, m) = channel_layout(input.shape())?;
    let count = lit::<E>((n * m) as f64);
    let d = input.data();
    let g = gout.data();
    let mut gin = vec![E::zero(); d.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ch in 0..c {
        let inv = E::one() / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let mut sg = E::zero(); // sum of gout
        let mut sgx = E::zero(); // sum of gout * xhat
        for b in 0..n {
            let base = (b * c + ch) * m;
            for i in base..base + m {
                let xh = (d[i] - mu) * inv;
                sg = sg + g[i];
                sgx = g[i].mul_add(xh, sgx);
            }
        }
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let k = gamma.data()[ch] * inv;
        for b in 0..n {
            let base = (b * c + ch) * m;
            for i in base..base + m {
                let xh = (d[i] - mu) * inv;
                gin[i] = k * (g[i] - (sg + xh * sgx) / count);
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gin)?,
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    ))
}

// ── Spatial global average pooling ────────────────────────────────────

/// [C,T,H,W] -> [C,T,1,1], mean over the spatial plane per channel per frame.
pub fn spatial_avgpool_fwd<E: Scalar>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("spatial_avgpool on shape {s:?}")));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let inv = E::one() / lit::<E>((h * w) as f64);
    let d = input.data();
    let out = (0..c * t)
        .map(|i| d[i * h * w..(i + 1) * h * w].iter().copied().sum::<E>() * inv)
        .collect();
    Tensor::new(vec![c, t, 1, 1], out)
}

pub fn spatial_avgpool_bwd<E: Scalar>(gout: &Tensor<E>, in_shape: &[usize]) -> Tensor<E> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let inv = E::one() / lit::<E>((h * w) as f64);
    let mut gin = Tensor::zeros(in_shape);
    let gd = gin.data_mut();
    for (i, gv) in gout.data().iter().enumerate() {
        let v = *gv * inv;
        for x in &mut gd[i * h * w..(i + 1) * h * w] {
            *x = v;
        }
    }
    gin
}

// ── Slicing / stacking for recurrent models ───────────────────────────

/// Extract frame `t` from [C,T,H,W] as [C,1,H,W].
pub fn time_slice<E: Scalar>(input: &Tensor<E>, t: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    if s.len() != 4 || t >= s[1] {
        return Err(Error::invalid(format!("time_slice {t} of shape {s:?}")));
    }
    let (c, tt, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let base = (ch * tt + t) * h * w;
        out.extend_from_slice(&input.data()[base..base + h * w]);
    }
    Tensor::new(vec![c, 1, h, w], out)
}

/// Scatter-add a [C,1,H,W] gradient back into a [C,T,H,W] buffer at frame `t`.
pub fn time_slice_bwd_into<E: Scalar>(gin: &mut Tensor<E>, gout: &Tensor<E>, t: usize) {
    let s = gin.shape().to_vec();
    let (c, tt, h, w) = (s[0], s[1], s[2], s[3]);
    let gd = gin.data_mut();
    for ch in 0..c {
        let base = (ch * tt + t) * h * w;
        for (x, gv) in gd[base..base + h * w].iter_mut().zip(&gout.data()[ch * h * w..]) {
            *x = *x + *gv;
        }
    }
}

/// Stack T tensors of shape [C,1,H,W] into [C,T,H,W].
pub fn stack_time<E: Scalar>(frames: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("stack_time of zero frames"))?;
    let s = first.shape();
    let (c, h, w) = (s[0], s[2], s[3]);
    let tt = frames.len();
    let mut out = vec![E::zero(); c * tt * h * w];
    for (t, f) in frames.iter().enumerate() {
        check_same_shape(f, first, "stack_time")?;
        for ch in 0..c {
            let src = &f.data()[ch * h * w..(ch + 1) * h * w];
            let dst = (ch * tt + t) * h * w;
            out[dst..dst + h * w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, tt, h, w], out)
}

/// Row `r` of a [R,C] matrix as [1,C].
pub fn slice_row<E: Scalar>(input: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    if s.len() != 2 || r >= s[0] {
        return Err(Error::invalid(format!("slice_row {r} of shape {s:?}")));
    }
    let c = s[1];
    Tensor::new(vec![1, c], input.data()[r * c..(r + 1) * c].to_vec())
}

/// Stack R tensors of shape [1,C] into [R,C].
pub fn stack_rows<E: Scalar>(rows: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("stack_rows of zero rows"))?;
    let c = first.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * c);
    for r in rows {
        check_same_shape(r, first, "stack_rows")?;
        out.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), c], out)
}

/// Concatenate [R,C1] and [R,C2] along columns into [R,C1+C2].
pub fn concat_cols<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::ShapeMismatch {
            context: "concat_cols",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (r, c1, c2) = (sa[0], sa[1], sb[1]);
    let mut out = Vec::with_capacity(r * (c1 + c2));
    for i in 0..r {
        out.extend_from_slice(&a.data()[i * c1..(i + 1) * c1]);
        out.extend_from_slice(&b.data()[i * c2..(i + 1) * c2]);
    }
    Tensor::new(vec![r, c1 + c2], out)
}
