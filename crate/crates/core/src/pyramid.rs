//! Invertible Laplacian-style pyramid: band-pass decomposition and its exact
//! telescoping composition, performed per channel.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gaussian_blur5, resize_nearest, resize_nearest_adjoint, Shape4, Tensor4};

/// Ordered pyramid levels; level `d` has spatial shape `(h/2ᵈ, w/2ᵈ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidStack<T> {
    levels: Vec<Tensor4<T>>,
}

impl<T: Scalar> PyramidStack<T> {
    pub fn new(levels: Vec<Tensor4<T>>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Shape("pyramid needs at least one level".into()))?
            .shape();
        for (d, lvl) in levels.iter().enumerate() {
            let expect = Shape4::new(first.n, first.c, first.h >> d, first.w >> d);
            if lvl.shape() != expect || (first.h >> d) << d != first.h || (first.w >> d) << d != first.w {
                return shape_err(format!(
                    "level {d} has shape {}, expected {expect} (exact halving of {first})",
                    lvl.shape()
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn zeros(base: Shape4, levels: usize) -> Result<Self> {
        check_divisible(base, levels)?;
        Ok(Self {
            levels: (0..levels)
                .map(|d| Tensor4::zeros(base.with_hw(base.h >> d, base.w >> d)))
                .collect(),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Tensor4<T>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor4<T>> {
        self.levels
    }

    pub fn level(&self, d: usize) -> &Tensor4<T> {
        &self.levels[d]
    }

    pub fn level_mut(&mut self, d: usize) -> &mut Tensor4<T> {
        &mut self.levels[d]
    }

    /// Replace level `d`; the new tensor must keep the level's shape.
    pub fn set_level(&mut self, d: usize, t: Tensor4<T>) -> Result<()> {
        if t.shape() != self.levels[d].shape() {
            return shape_err(format!(
                "level {d} replacement {} != {}",
                t.shape(),
                self.levels[d].shape()
            ));
        }
        self.levels[d] = t;
        Ok(())
    }

    /// Shape of the full-resolution level 0.
    pub fn base_shape(&self) -> Shape4 {
        self.levels[0].shape()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.levels.len() != other.levels.len() {
            return shape_err(format!(
                "pyramid with {} levels vs {}",
                self.levels.len(),
                other.levels.len()
            ));
        }
        for (a, b) in self.levels.iter().zip(&other.levels) {
            a.check_same_shape(b)?;
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T + Copy) -> Result<Self> {
        self.check_same_shape(other)?;
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.zip_map(b, f))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        let mut m = T::zero();
        for (a, b) in self.levels.iter().zip(&other.levels) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }

    pub fn bytes(&self) -> usize {
        self.levels.iter().map(Tensor4::bytes).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(Tensor4::all_finite)
    }

    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let levels = self
            .levels
            .iter()
            .map(|l| l.batch_item(n))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("stack of zero pyramids".into()))?;
        let levels = (0..first.num_levels())
            .map(|d| {
                let parts: Vec<&Tensor4<T>> = items.iter().map(|p| &p.levels[d]).collect();
                Tensor4::stack_batch(&parts)
            })
            .collect::<Result<_>>()?;
        Self::new(levels)
    }

    pub fn cast<U: Scalar>(&self) -> PyramidStack<U> {
        PyramidStack {
            levels: self.levels.iter().map(Tensor4::cast).collect(),
        }
    }
}

fn check_divisible(s: Shape4, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("pyramid level count must be >= 1".into()));
    }
    let f = 1usize
        .checked_shl((levels - 1) as u32)
        .ok_or_else(|| Error::Config(format!("{levels} pyramid levels is too many")))?;
    if s.h % f != 0 || s.w % f != 0 {
        return shape_err(format!(
            "spatial size {}x{} not divisible by 2^{} for {levels} levels",
            s.h,
            s.w,
            levels - 1
        ));
    }
    Ok(())
}

/// Operator D: blur, then nearest-neighbor halving.
pub fn downsample<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return shape_err(format!("downsample needs even spatial dims, got {}x{}", s.h, s.w));
    }
    Ok(resize_nearest(&gaussian_blur5(x), s.h / 2, s.w / 2))
}

/// Operator U: nearest-neighbor doubling, then blur.
pub fn upsample<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    gaussian_blur5(&resize_nearest(x, 2 * s.h, 2 * s.w))
}

/// Adjoint of [`downsample`] onto a grid twice the size of `g`.
pub fn downsample_adjoint<T: Scalar>(g: &Tensor4<T>) -> Tensor4<T> {
    let s = g.shape();
    gaussian_blur5(&resize_nearest_adjoint(g, 2 * s.h, 2 * s.w))
}

/// Adjoint of [`upsample`] onto a grid half the size of `g`.
pub fn upsample_adjoint<T: Scalar>(g: &Tensor4<T>) -> Tensor4<T> {
    let s = g.shape();
    resize_nearest_adjoint(&gaussian_blur5(g), s.h / 2, s.w / 2)
}

/// `level_d = Dᵈx − U(Dᵈ⁺¹x)` for `d < L−1`; the last level keeps the
/// low-pass residual `Dᴸ⁻¹x`, which makes composition exact.
pub fn decompose<T: Scalar>(x: &Tensor4<T>, levels: usize) -> Result<PyramidStack<T>> {
    check_divisible(x.shape(), levels)?;
    let mut lows = vec![x.clone()];
    for d in 1..levels {
        let next = downsample(&lows[d - 1])?;
        lows.push(next);
    }
    let mut out = Vec::with_capacity(levels);
    for d in 0..levels - 1 {
        out.push(lows[d].sub(&upsample(&lows[d + 1]))?);
    }
    out.push(lows.pop().expect("at least one level"));
    PyramidStack::new(out)
}

/// `x = Σ_d Uᵈ(level_d)`, evaluated coarse-to-fine.
pub fn compose<T: Scalar>(stack: &PyramidStack<T>) -> Tensor4<T> {
    let levels = stack.levels();
    let mut acc = levels[levels.len() - 1].clone();
    for d in (0..levels.len() - 1).rev() {
        let mut up = upsample(&acc);
        up.add_assign(&levels[d])
            .expect("pyramid levels halve exactly by construction");
        acc = up;
    }
    acc
}

/// Adjoint of [`compose`]: distributes a full-resolution gradient to every level.
pub fn compose_adjoint<T: Scalar>(g: &Tensor4<T>, levels: usize) -> Result<PyramidStack<T>> {
    check_divisible(g.shape(), levels)?;
    let mut out = vec![g.clone()];
    for d in 1..levels {
        let next = upsample_adjoint(&out[d - 1]);
        out.push(next);
    }
    PyramidStack::new(out)
}

/// Adjoint of [`decompose`]: pulls per-level gradients back to the input.
pub fn decompose_adjoint<T: Scalar>(g: &PyramidStack<T>) -> Result<Tensor4<T>> {
    let levels = g.levels();
    let l = levels.len();
    // gradient w.r.t. the low-pass chain a_d = Dᵈx, before chaining through D
    let mut ga: Vec<Tensor4<T>> = Vec::with_capacity(l);
    for d in 0..l {
        let mut gd = levels[d].clone();
        if d > 0 {
            gd.add_scaled(&upsample_adjoint(&levels[d - 1]), -T::one())?;
        }
        ga.push(gd);
    }
    let mut acc = ga.pop().expect("at least one level");
    while let Some(mut gd) = ga.pop() {
        gd.add_assign(&downsample_adjoint(&acc))?;
        acc = gd;
    }
    Ok(acc)
}
