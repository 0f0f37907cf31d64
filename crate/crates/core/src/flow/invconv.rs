use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{channel_outer, mix_channels, random_orthogonal, Lu, Matrix, Tensor4};

/// Invertible 1×1 convolution in PLU form: `A = P·L·(U + diag(exp(s̃)))`.
///
/// Only the strictly lower part of `l` and the strictly upper part of `u`
/// are read; the unit diagonal of `L` is implicit. With `normalize` set,
/// `s̃ = s − mean(s)` so `log|A| = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvConv1x1<T> {
    pub p: Matrix<T>,
    pub l: Matrix<T>,
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub normalize: bool,
}

/// Parameter gradients of [`InvConv1x1`] (masked to the trainable entries).
#[derive(Clone, Debug)]
pub struct InvConvGrads<T> {
    pub l: Vec<T>,
    pub u: Vec<T>,
    pub s: Vec<T>,
}

impl<T: Scalar> InvConv1x1<T> {
    pub fn identity(c: usize, normalize: bool) -> Self {
        Self {
            p: Matrix::identity(c),
            l: Matrix::zeros(c, c),
            u: Matrix::zeros(c, c),
            s: vec![T::zero(); c],
            normalize,
        }
    }

    /// PLU factors of a random orthogonal matrix; column signs are chosen so
    /// the diagonal of `U` is positive and `s = log diag(U)`.
    pub fn random<R: Rng + ?Sized>(c: usize, normalize: bool, rng: &mut R) -> Result<Self> {
        let q: Matrix<f64> = random_orthogonal(c, c, rng)?;
        let lu = Lu::factor(&q)?;
        let mut l = Matrix::<T>::zeros(c, c);
        let mut u = Matrix::<T>::zeros(c, c);
        let mut s = vec![T::zero(); c];
        for col in 0..c {
            let sign = lu.u.get(col, col).signum();
            for r in 0..c {
                if r > col {
                    l.set(r, col, T::c(lu.l.get(r, col)));
                }
                if r < col {
                    u.set(r, col, T::c(sign * lu.u.get(r, col)));
                }
            }
            s[col] = T::c(lu.u.get(col, col).abs().ln());
        }
        Ok(Self {
            p: lu.permutation_matrix().cast(),
            l,
            u,
            s,
            normalize,
        })
    }

    pub fn channels(&self) -> usize {
        self.s.len()
    }

    /// `s̃` as used in the weight.
    pub fn effective_log_diag(&self) -> Vec<T> {
        if self.normalize {
            let mean = T::c(self.s.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / self.s.len() as f64);
            self.s.iter().map(|&v| v - mean).collect()
        } else {
            self.s.clone()
        }
    }

    fn unit_lower(&self) -> Matrix<T> {
        let c = self.channels();
        Matrix::from_fn(c, c, |r, col| match r.cmp(&col) {
            std::cmp::Ordering::Greater => self.l.get(r, col),
            std::cmp::Ordering::Equal => T::one(),
            std::cmp::Ordering::Less => T::zero(),
        })
    }

    fn upper_with_diag(&self) -> Matrix<T> {
        let c = self.channels();
        let d = self.effective_log_diag();
        Matrix::from_fn(c, c, |r, col| match r.cmp(&col) {
            std::cmp::Ordering::Less => self.u.get(r, col),
            std::cmp::Ordering::Equal => d[r].exp(),
            std::cmp::Ordering::Greater => T::zero(),
        })
    }

    /// The assembled mixing matrix `A`.
    pub fn weight(&self) -> Matrix<T> {
        self.p
            .matmul(&self.unit_lower())
            .and_then(|pl| pl.matmul(&self.upper_with_diag()))
            .expect("square factors of equal size")
    }

    pub fn forward(&self, y: &Tensor4<T>) -> Result<Tensor4<T>> {
        mix_channels(y, &self.weight())
    }

    /// Per-pixel `y = M⁻¹·L⁻¹·Pᵀ·z` by triangular solves.
    pub fn inverse(&self, z: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = z.shape();
        let c = self.channels();
        if s.c != c {
            return shape_err(format!("invconv over {c} channels got {}", s.c));
        }
        let pt = self.p.transpose();
        let lower = self.unit_lower();
        let upper = self.upper_with_diag();
        let mut out = Tensor4::zeros(s);
        let mut pix = vec![T::zero(); c];
        for n in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    for (k, v) in pix.iter_mut().enumerate() {
                        *v = z.get(n, k, i, j);
                    }
                    let v = pt.matvec(&pix);
                    let w = crate::tensor::linalg::solve_lower(&lower, &v, true);
                    let y = crate::tensor::linalg::solve_upper(&upper, &w);
                    for (k, &v) in y.iter().enumerate() {
                        out.set(n, k, i, j, v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `log|A|·h·w` per sample.
    pub fn logdet(&self, h: usize, w: usize) -> T {
        let s: Vec<f64> = self.s.iter().map(|v| v.to_f64_lossy()).collect();
        let mean = if self.normalize { s.iter().sum::<f64>() / s.len() as f64 } else { 0.0 };
        T::c(s.iter().map(|v| v - mean).sum::<f64>() * (h * w) as f64)
    }

    /// Gradients given the forward input `y` and upstream `grad_z`; returns
    /// the parameter gradients and the gradient w.r.t. `y`.
    pub fn backward(&self, y: &Tensor4<T>, grad_z: &Tensor4<T>) -> Result<(InvConvGrads<T>, Tensor4<T>)> {
        let c = self.channels();
        let lower = self.unit_lower();
        let upper = self.upper_with_diag();
        let a = self.p.matmul(&lower)?.matmul(&upper)?;
        let g_y = mix_channels(grad_z, &a.transpose())?;
        let g_a = channel_outer(grad_z, y)?;
        // A = P·L·M: dL = Pᵀ·gA·Mᵀ, dM = (P·L)ᵀ·gA
        let g_l_full = self.p.transpose().matmul(&g_a)?.matmul(&upper.transpose())?;
        let g_m = self.p.matmul(&lower)?.transpose().matmul(&g_a)?;
        let mut g_l = vec![T::zero(); c * c];
        let mut g_u = vec![T::zero(); c * c];
        for r in 0..c {
            for col in 0..c {
                if r > col {
                    g_l[r * c + col] = g_l_full.get(r, col);
                } else if r < col {
                    g_u[r * c + col] = g_m.get(r, col);
                }
            }
        }
        let d = self.effective_log_diag();
        let g_tilde: Vec<T> = (0..c).map(|i| g_m.get(i, i) * d[i].exp()).collect();
        let g_s = if self.normalize {
            let mean = g_tilde.iter().copied().sum::<T>() / T::c(c as f64);
            g_tilde.iter().map(|&v| v - mean).collect()
        } else {
            g_tilde
        };
        Ok((InvConvGrads { l: g_l, u: g_u, s: g_s }, g_y))
    }
}
