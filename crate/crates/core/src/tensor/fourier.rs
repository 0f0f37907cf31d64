use super::Tensor4;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Real and imaginary parts of a per-plane 2-D spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct Complex2D<T> {
    pub re: Tensor4<T>,
    pub im: Tensor4<T>,
}

impl<T: Scalar> Complex2D<T> {
    pub fn new(re: Tensor4<T>, im: Tensor4<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return shape_err(format!("re {} and im {} differ", re.shape(), im.shape()));
        }
        Ok(Self { re, im })
    }

    /// Elementwise complex magnitude.
    pub fn magnitude(&self) -> Tensor4<T> {
        self.re
            .zip_map(&self.im, |a, b| a.hypot(b))
            .expect("re/im shapes agree by construction")
    }
}

/// `cos(2π k / n)` and `sin(2π k / n)` for `k in 0..n`.
fn twiddles<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (T::c(a.cos()), T::c(a.sin()))
        })
        .unzip()
}

/// One separable pass over rows of length `len` (stride 1) or columns.
/// Computes `Σ_k (re[k] + ι im[k]) · exp(sign·2πι·uk/len)` for every `u`.
#[allow(clippy::too_many_arguments)]
fn dft_axis<T: Scalar>(
    re: &mut [T],
    im: &mut [T],
    h: usize,
    w: usize,
    along_rows: bool,
    sign: T,
    cos: &[T],
    sin: &[T],
) {
    let (len, count) = if along_rows { (w, h) } else { (h, w) };
    let mut buf_re = vec![T::zero(); len];
    let mut buf_im = vec![T::zero(); len];
    for line in 0..count {
        let at = |k: usize| if along_rows { line * w + k } else { k * w + line };
        for u in 0..len {
            let (mut acc_re, mut acc_im) = (T::zero(), T::zero());
            for k in 0..len {
                let idx = (u * k) % len;
                let (c, s) = (cos[idx], sign * sin[idx]);
                let (xr, xi) = (re[at(k)], im[at(k)]);
                acc_re += xr * c - xi * s;
                acc_im += xr * s + xi * c;
            }
            buf_re[u] = acc_re;
            buf_im[u] = acc_im;
        }
        for u in 0..len {
            re[at(u)] = buf_re[u];
            im[at(u)] = buf_im[u];
        }
    }
}

fn transform<T: Scalar>(re_in: &Tensor4<T>, im_in: Option<&Tensor4<T>>, sign: f64) -> Complex2D<T> {
    let s = re_in.shape();
    let (ch, sh) = twiddles::<T>(s.h);
    let (cw, sw) = twiddles::<T>(s.w);
    let mut re = re_in.clone();
    let mut im = match im_in {
        Some(t) => t.clone(),
        None => Tensor4::zeros(s),
    };
    let sign = T::c(sign);
    for n in 0..s.n {
        for c in 0..s.c {
            let mut plane_re = re.plane(n, c).to_vec();
            let mut plane_im = im.plane(n, c).to_vec();
            dft_axis(&mut plane_re, &mut plane_im, s.h, s.w, true, sign, &cw, &sw);
            dft_axis(&mut plane_re, &mut plane_im, s.h, s.w, false, sign, &ch, &sh);
            re.plane_mut(n, c).copy_from_slice(&plane_re);
            im.plane_mut(n, c).copy_from_slice(&plane_im);
        }
    }
    Complex2D { re, im }
}

/// Unnormalized 2-D DFT of every `(n, c)` plane:
/// `X[u,v] = Σ x[i,j]·exp(−2πι(ui/h + vj/w))`.
pub fn dft2<T: Scalar>(x: &Tensor4<T>) -> Complex2D<T> {
    transform(x, None, -1.0)
}

/// Adjoint of [`dft2`] viewed as a real-to-complex linear map: returns
/// `Re(Σ_{u,v} G[u,v]·exp(+2πι(ui/h + vj/w)))` for `G = grad.re + ι grad.im`.
pub fn dft2_adjoint<T: Scalar>(grad: &Complex2D<T>) -> Tensor4<T> {
    transform(&grad.re, Some(&grad.im), 1.0).re
}
