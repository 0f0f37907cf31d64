use super::{Shape4, Tensor4};
use crate::scalar::Scalar;

/// 1-D binomial taps; the 5×5 blur kernel is their outer product.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Map an out-of-range index into `0..n` by half-sample symmetric extension
/// (`x[-1] = x[0]`, `x[n] = x[n-1]`), periodic with period `2n`.
#[inline]
pub fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Depthwise 5×5 binomial blur with symmetric boundary extension.
///
/// The extension makes the blur matrix symmetric and doubly stochastic, so
/// constants and per-plane means are preserved and the operator is its own
/// adjoint.
pub fn gaussian_blur5<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let taps: [T; 5] = BINOMIAL5.map(T::c);
    let col_idx: Vec<[usize; 5]> = (0..w)
        .map(|j| std::array::from_fn(|k| symmetric_index(j as isize + k as isize - 2, w)))
        .collect();
    let row_idx: Vec<[usize; 5]> = (0..h)
        .map(|i| std::array::from_fn(|k| symmetric_index(i as isize + k as isize - 2, h)))
        .collect();

    let mut out = Tensor4::zeros(s);
    let mut tmp = vec![T::zero(); h * w];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for i in 0..h {
                let row = &src[i * w..(i + 1) * w];
                for (j, idx) in col_idx.iter().enumerate() {
                    tmp[i * w + j] = taps[0] * row[idx[0]]
                        + taps[1] * row[idx[1]]
                        + taps[2] * row[idx[2]]
                        + taps[3] * row[idx[3]]
                        + taps[4] * row[idx[4]];
                }
            }
            let dst = out.plane_mut(n, c);
            for (i, idx) in row_idx.iter().enumerate() {
                let drow = &mut dst[i * w..(i + 1) * w];
                for (k, &r) in idx.iter().enumerate() {
                    let srow = &tmp[r * w..(r + 1) * w];
                    let t = taps[k];
                    for (d, &v) in drow.iter_mut().zip(srow) {
                        *d += t * v;
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbor resize: `out[i, j] = x[floor(i·h/h_out), floor(j·w/w_out)]`.
///
/// # Panics
/// If `h_out` or `w_out` is zero.
pub fn resize_nearest<T: Scalar>(x: &Tensor4<T>, h_out: usize, w_out: usize) -> Tensor4<T> {
    let s = x.shape();
    if h_out == s.h && w_out == s.w {
        return x.clone();
    }
    let rows: Vec<usize> = (0..h_out).map(|i| i * s.h / h_out).collect();
    let cols: Vec<usize> = (0..w_out).map(|j| j * s.w / w_out).collect();
    let mut out = Tensor4::zeros(s.with_hw(h_out, w_out));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (i, &r) in rows.iter().enumerate() {
                for (j, &col) in cols.iter().enumerate() {
                    dst[i * w_out + j] = src[r * s.w + col];
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_nearest`]: scatter-add `grad` back onto a `(h_src, w_src)` grid.
pub fn resize_nearest_adjoint<T: Scalar>(grad: &Tensor4<T>, h_src: usize, w_src: usize) -> Tensor4<T> {
    let s = grad.shape();
    let rows: Vec<usize> = (0..s.h).map(|i| i * h_src / s.h).collect();
    let cols: Vec<usize> = (0..s.w).map(|j| j * w_src / s.w).collect();
    let mut out = Tensor4::zeros(s.with_hw(h_src, w_src));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (i, &r) in rows.iter().enumerate() {
                for (j, &col) in cols.iter().enumerate() {
                    dst[r * w_src + col] += src[i * s.w + j];
                }
            }
        }
    }
    out
}

/// Interpolation taps for one axis under half-pixel-center bilinear sampling.
fn bilinear_taps(n_src: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_src as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(n_src - 1);
            let i1 = (i0 + 1).min(n_src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Scalar>(x: &Tensor4<T>, h_out: usize, w_out: usize) -> Tensor4<T> {
    let s = x.shape();
    if h_out == s.h && w_out == s.w {
        return x.clone();
    }
    let rt = bilinear_taps(s.h, h_out);
    let ct = bilinear_taps(s.w, w_out);
    let mut out = Tensor4::zeros(s.with_hw(h_out, w_out));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (i, &(r0, r1, fr)) in rt.iter().enumerate() {
                let (wr0, wr1) = (T::c(1.0 - fr), T::c(fr));
                for (j, &(c0, c1, fc)) in ct.iter().enumerate() {
                    let (wc0, wc1) = (T::c(1.0 - fc), T::c(fc));
                    dst[i * w_out + j] = wr0 * (wc0 * src[r0 * s.w + c0] + wc1 * src[r0 * s.w + c1])
                        + wr1 * (wc0 * src[r1 * s.w + c0] + wc1 * src[r1 * s.w + c1]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] back onto a `(h_src, w_src)` grid.
pub fn resize_bilinear_adjoint<T: Scalar>(grad: &Tensor4<T>, h_src: usize, w_src: usize) -> Tensor4<T> {
    let s = grad.shape();
    if h_src == s.h && w_src == s.w {
        return grad.clone();
    }
    let rt = bilinear_taps(h_src, s.h);
    let ct = bilinear_taps(w_src, s.w);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h_src, w_src));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (i, &(r0, r1, fr)) in rt.iter().enumerate() {
                let (wr0, wr1) = (T::c(1.0 - fr), T::c(fr));
                for (j, &(c0, c1, fc)) in ct.iter().enumerate() {
                    let (wc0, wc1) = (T::c(1.0 - fc), T::c(fc));
                    let g = src[i * s.w + j];
                    dst[r0 * w_src + c0] += wr0 * wc0 * g;
                    dst[r0 * w_src + c1] += wr0 * wc1 * g;
                    dst[r1 * w_src + c0] += wr1 * wc0 * g;
                    dst[r1 * w_src + c1] += wr1 * wc1 * g;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct 25-tap evaluation with explicit mirrored lookups.
    fn naive_blur(x: &Tensor4<f64>) -> Tensor4<f64> {
        let s = x.shape();
        Tensor4::from_fn(s, |n, c, i, j| {
            let mut acc = 0.0;
            for di in -2isize..=2 {
                for dj in -2isize..=2 {
                    let mirror = |p: isize, len: usize| -> usize {
                        let mut p = p;
                        // reflect across -0.5 and len-0.5 until in range
                        loop {
                            if p < 0 {
                                p = -p - 1;
                            } else if p >= len as isize {
                                p = 2 * len as isize - p - 1;
                            } else {
                                return p as usize;
                            }
                        }
                    };
                    let r = mirror(i as isize + di, s.h);
                    let q = mirror(j as isize + dj, s.w);
                    let k = BINOMIAL5[(di + 2) as usize] * BINOMIAL5[(dj + 2) as usize];
                    acc += k * x.get(n, c, r, q);
                }
            }
            acc
        })
    }

    #[test]
    fn symmetric_index_small_sizes() {
        assert_eq!(symmetric_index(-1, 1), 0);
        assert_eq!(symmetric_index(2, 1), 0);
        assert_eq!(symmetric_index(-2, 2), 1);
        assert_eq!(symmetric_index(-1, 5), 0);
        assert_eq!(symmetric_index(5, 5), 4);
        assert_eq!(symmetric_index(6, 5), 3);
    }

    #[test]
    fn blur_preserves_constants() {
        for &(h, w) in &[(1, 1), (2, 3), (5, 5), (8, 4)] {
            let x = Tensor4::<f64>::full(Shape4::new(1, 2, h, w), 3.25);
            let y = gaussian_blur5(&x);
            assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-15));
        }
    }

    #[test]
    fn blur_impulse_response_is_kernel() {
        let mut x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 5, 5));
        x.set(0, 0, 2, 2, 1.0);
        let y = gaussian_blur5(&x);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(y.get(0, 0, i, j), BINOMIAL5[i] * BINOMIAL5[j]);
            }
        }
    }

    #[test]
    fn blur_matches_naive_convolution() {
        let x = random(Shape4::new(1, 1, 9, 9), 3);
        let d = gaussian_blur5(&x).max_abs_diff(&naive_blur(&x)).unwrap();
        assert!(d < 1e-14, "{d}");
        let x = random(Shape4::new(2, 3, 3, 7), 4);
        assert!(gaussian_blur5(&x).max_abs_diff(&naive_blur(&x)).unwrap() < 1e-14);
    }

    #[test]
    fn blur_preserves_plane_mean_and_is_self_adjoint() {
        for &(h, w) in &[(1, 4), (2, 2), (3, 5), (16, 9)] {
            let x = random(Shape4::new(1, 2, h, w), (h * w) as u64);
            let y = gaussian_blur5(&x);
            for c in 0..2 {
                let mx: f64 = x.plane(0, c).iter().sum();
                let my: f64 = y.plane(0, c).iter().sum();
                assert!((mx - my).abs() <= 1e-6 * mx.abs().max(1e-12) + 1e-13);
            }
            let z = random(x.shape(), 99);
            let lhs = gaussian_blur5(&x).dot(&z).unwrap();
            let rhs = x.dot(&gaussian_blur5(&z)).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_examples() {
        let x = Tensor4::<f64>::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resize_nearest(&x, 2, 2), x);
        assert_eq!(resize_nearest(&x, 1, 1).data(), &[1.0]);
        let up = resize_nearest(&x, 4, 4);
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(resize_nearest(&up, 2, 2), x);
    }

    #[test]
    fn nearest_adjoint_dot_product() {
        for &(h, w, ho, wo) in &[(4, 6, 2, 3), (3, 3, 6, 6), (5, 4, 2, 7)] {
            let x = random(Shape4::new(1, 2, h, w), 1);
            let g = random(Shape4::new(1, 2, ho, wo), 2);
            let lhs = resize_nearest(&x, ho, wo).dot(&g).unwrap();
            let rhs = x.dot(&resize_nearest_adjoint(&g, h, w)).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_halving_is_box_average() {
        let x = random(Shape4::new(1, 1, 4, 6), 5);
        let y = resize_bilinear(&x, 2, 3);
        for i in 0..2 {
            for j in 0..3 {
                let avg = (x.get(0, 0, 2 * i, 2 * j)
                    + x.get(0, 0, 2 * i + 1, 2 * j)
                    + x.get(0, 0, 2 * i, 2 * j + 1)
                    + x.get(0, 0, 2 * i + 1, 2 * j + 1))
                    / 4.0;
                assert!((y.get(0, 0, i, j) - avg).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_adjoint_holds() {
        let c = Tensor4::<f64>::full(Shape4::new(1, 1, 3, 5), 2.0);
        assert!(resize_bilinear(&c, 6, 10).data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        for &(h, w, ho, wo) in &[(4, 4, 8, 8), (8, 8, 4, 4), (1, 1, 2, 2), (2, 2, 1, 1)] {
            let x = random(Shape4::new(2, 1, h, w), 7);
            let g = random(Shape4::new(2, 1, ho, wo), 8);
            let lhs = resize_bilinear(&x, ho, wo).dot(&g).unwrap();
            let rhs = x.dot(&resize_bilinear_adjoint(&g, h, w)).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
