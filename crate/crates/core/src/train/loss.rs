use crate::error::Result;
use crate::pyramid::{compose, PyramidStack};
use crate::scalar::Scalar;
use crate::tensor::{dft2, dft2_adjoint, Complex2D, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Mean complex magnitude of the 2-D spectrum.
    Fourier,
    /// Mean square in the spatial domain.
    Spatial,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fourier" => Some(Self::Fourier),
            "spatial" => Some(Self::Spatial),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fourier => "fourier",
            Self::Spatial => "spatial",
        }
    }
}

/// Loss of a composed difference and its gradient.
pub fn loss_and_grad<T: Scalar>(kind: LossKind, diff: &Tensor4<T>) -> (T, Tensor4<T>) {
    let count = T::c(diff.len().max(1) as f64);
    match kind {
        LossKind::Fourier => {
            let spec = dft2(diff);
            let mag = spec.magnitude();
            let loss = mag.sum() / count;
            let unit = |part: &Tensor4<T>| {
                part.zip_map(&mag, |p, m| if m > T::zero() { p / (m * count) } else { T::zero() })
                    .expect("spectrum parts share a shape")
            };
            let g = Complex2D {
                re: unit(&spec.re),
                im: unit(&spec.im),
            };
            (loss, dft2_adjoint(&g))
        }
        LossKind::Spatial => {
            let loss = diff.dot(diff).expect("same tensor") / count;
            (loss, diff.scale(T::c(2.0) / count))
        }
    }
}

/// Difference of two latent pyramids composed to full resolution.
pub fn composed_difference<T: Scalar>(z_i: &PyramidStack<T>, z_j: &PyramidStack<T>) -> Result<Tensor4<T>> {
    Ok(compose(&z_i.sub(z_j)?))
}

/// Mean over `(n, c, u, v)` of `|DFT(compose(z_i − z_j))|`.
pub fn fourier_loss<T: Scalar>(z_i: &PyramidStack<T>, z_j: &PyramidStack<T>) -> Result<T> {
    pair_loss(LossKind::Fourier, z_i, z_j)
}

pub fn pair_loss<T: Scalar>(kind: LossKind, z_i: &PyramidStack<T>, z_j: &PyramidStack<T>) -> Result<T> {
    Ok(loss_and_grad(kind, &composed_difference(z_i, z_j)?).0)
}
