use super::{symmetric_index, Tensor4};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Gradients of a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct Conv3x3Grads<T> {
    /// `[c_out, c_in, 3, 3]` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Tensor4<T>,
}

/// Copy each plane of batch item `n` into a `(h+2) × (w+2)` buffer with a
/// one-pixel symmetric border.
fn pad_item<T: Scalar>(x: &Tensor4<T>, n: usize) -> Vec<T> {
    let s = x.shape();
    let (ph, pw) = (s.h + 2, s.w + 2);
    let mut out = vec![T::zero(); s.c * ph * pw];
    let cols: Vec<usize> = (0..pw).map(|q| symmetric_index(q as isize - 1, s.w)).collect();
    for c in 0..s.c {
        let src = x.plane(n, c);
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for p in 0..ph {
            let r = symmetric_index(p as isize - 1, s.h);
            let srow = &src[r * s.w..(r + 1) * s.w];
            for (q, &col) in cols.iter().enumerate() {
                dst[p * pw + q] = srow[col];
            }
        }
    }
    out
}

fn check(x: &Tensor4<impl Scalar>, weight_len: usize, bias_len: usize, c_out: usize) -> Result<()> {
    let c_in = x.shape().c;
    if weight_len != c_out * c_in * 9 || bias_len != c_out {
        return shape_err(format!(
            "3x3 conv with {c_in} input / {c_out} output channels needs {} weights and {c_out} biases, got {weight_len} and {bias_len}",
            c_out * c_in * 9
        ));
    }
    Ok(())
}

/// Same-size 3×3 convolution (cross-correlation) with symmetric border
/// extension; `weight` is `[c_out, c_in, 3, 3]`.
pub fn conv3x3<T: Scalar>(x: &Tensor4<T>, weight: &[T], bias: &[T], c_out: usize) -> Result<Tensor4<T>> {
    check(x, weight.len(), bias.len(), c_out)?;
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let mut out = Tensor4::zeros(s.with_c(c_out));
    for n in 0..s.n {
        let pad = pad_item(x, n);
        for o in 0..c_out {
            let dst = out.plane_mut(n, o);
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for k in 0..s.c {
                let src = &pad[k * pplane..(k + 1) * pplane];
                let wk = &weight[(o * s.c + k) * 9..(o * s.c + k + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wk[ky * 3 + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for i in 0..h {
                            let srow = &src[(i + ky) * pw + kx..(i + ky) * pw + kx + w];
                            let drow = &mut dst[i * w..(i + 1) * w];
                            for (d, &v) in drow.iter_mut().zip(srow) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv3x3`] for upstream gradient `grad` (shape of the output).
pub fn conv3x3_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    grad: &Tensor4<T>,
) -> Result<Conv3x3Grads<T>> {
    let s = x.shape();
    let c_out = grad.shape().c;
    check(x, weight.len(), c_out, c_out)?;
    if grad.shape() != s.with_c(c_out) {
        return shape_err(format!("conv grad {} does not match input {}", grad.shape(), s));
    }
    let (h, w) = (s.h, s.w);
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); c_out];
    let mut gx = Tensor4::zeros(s);
    let mut gpad = vec![T::zero(); s.c * pplane];
    let rows: Vec<usize> = (0..h + 2).map(|p| symmetric_index(p as isize - 1, h)).collect();
    let cols: Vec<usize> = (0..pw).map(|q| symmetric_index(q as isize - 1, w)).collect();

    for n in 0..s.n {
        let pad = pad_item(x, n);
        gpad.iter_mut().for_each(|v| *v = T::zero());
        for o in 0..c_out {
            let g = grad.plane(n, o);
            gb[o] += g.iter().copied().sum::<T>();
            for k in 0..s.c {
                let src = &pad[k * pplane..(k + 1) * pplane];
                let gsrc = &mut gpad[k * pplane..(k + 1) * pplane];
                let base = (o * s.c + k) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weight[base + ky * 3 + kx];
                        let mut acc = T::zero();
                        for i in 0..h {
                            let off = (i + ky) * pw + kx;
                            let grow = &g[i * w..(i + 1) * w];
                            let srow = &src[off..off + w];
                            acc += grow.iter().zip(srow).map(|(&a, &b)| a * b).sum::<T>();
                            if wv != T::zero() {
                                let prow = &mut gsrc[off..off + w];
                                for (p, &gv) in prow.iter_mut().zip(grow) {
                                    *p += wv * gv;
                                }
                            }
                        }
                        gw[base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
        for k in 0..s.c {
            let gsrc = &gpad[k * pplane..(k + 1) * pplane];
            let dst = gx.plane_mut(n, k);
            for (p, &r) in rows.iter().enumerate() {
                for (q, &col) in cols.iter().enumerate() {
                    dst[r * w + col] += gsrc[p * pw + q];
                }
            }
        }
    }
    Ok(Conv3x3Grads {
        weight: gw,
        bias: gb,
        input: gx,
    })
}
