//! Dense rank-4 tensors in `(n, c, h, w)` row-major layout and the kernels
//! the flow layers are built from.

mod conv;
mod filter;
mod fourier;
pub(crate) mod linalg;

pub use conv::{conv3x3, conv3x3_backward, Conv3x3Grads};
pub use filter::{
    gaussian_blur5, resize_bilinear, resize_bilinear_adjoint, resize_nearest,
    resize_nearest_adjoint, symmetric_index, BINOMIAL5,
};
pub use fourier::{dft2, dft2_adjoint, Complex2D};
pub use linalg::{random_orthogonal, Lu, Matrix};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Tensor dimensions: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub const fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub const fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return shape_err(format!("all dimensions must be >= 1, got {self}"));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense `(n, c, h, w)` array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn full(shape: Shape4, value: T) -> Self {
        shape.validate().expect("tensor dimensions must be >= 1");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return shape_err(format!(
                "buffer of length {} does not match shape {shape}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        shape.validate().expect("tensor dimensions must be >= 1");
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        data.push(f(n, c, i, j));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * T::BYTES
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + i) * self.shape.w + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.offset(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: T) {
        let o = self.offset(n, c, i, j);
        self.data[o] = v;
    }

    /// The contiguous `h × w` plane at `(n, c)`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shape {} != {}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k · other`
    pub fn add_scaled(&mut self, other: &Self, k: T) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.add_scaled(other, T::one())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::c(v.to_f64_lossy())).collect(),
        }
    }

    /// Channel slice `[start, start + len)`.
    pub fn channels(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.c {
            return shape_err(format!(
                "channel range {start}..{} out of bounds for {} channels",
                start + len,
                self.shape.c
            ));
        }
        let shape = self.shape.with_c(len);
        let p = self.shape.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            let base = (n * self.shape.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Self { shape, data })
    }

    /// Concatenate along the channel axis; all parts share `(n, h, w)`.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = first.shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if s.n != base.n || s.h != base.h || s.w != base.w {
                return shape_err(format!("cannot concat {s} with {base}"));
            }
            c += s.c;
        }
        let shape = base.with_c(c);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..base.n {
            for p in parts {
                let chunk = p.shape.c * p.shape.plane();
                data.extend_from_slice(&p.data[n * chunk..(n + 1) * chunk]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Single batch item `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if n >= self.shape.n {
            return shape_err(format!("batch index {n} out of range {}", self.shape.n));
        }
        let chunk = self.shape.c * self.shape.plane();
        Ok(Self {
            shape: self.shape.with_n(1),
            data: self.data[n * chunk..(n + 1) * chunk].to_vec(),
        })
    }

    /// Stack tensors along the batch axis; all share `(c, h, w)`.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let base = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let s = t.shape;
            if s.c != base.c || s.h != base.h || s.w != base.w {
                return shape_err(format!("cannot stack {s} with {base}"));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: base.with_n(n),
            data,
        })
    }
}

/// Per-pixel channel mixing: `out[n,o,i,j] = Σ_k W[o,k]·x[n,k,i,j]`.
pub fn mix_channels<T: Scalar>(x: &Tensor4<T>, w: &Matrix<T>) -> Result<Tensor4<T>> {
    let s = x.shape();
    if w.cols() != s.c {
        return shape_err(format!(
            "mixing matrix has {} input channels, tensor has {}",
            w.cols(),
            s.c
        ));
    }
    let out_shape = s.with_c(w.rows());
    let mut out = Tensor4::zeros(out_shape);
    let p = s.plane();
    for n in 0..s.n {
        for o in 0..w.rows() {
            let dst_start = (n * w.rows() + o) * p;
            for k in 0..s.c {
                let wk = w.get(o, k);
                if wk == T::zero() {
                    continue;
                }
                let src = x.plane(n, k);
                let dst = &mut out.data_mut()[dst_start..dst_start + p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wk * v;
                }
            }
        }
    }
    Ok(out)
}

/// `Σ_{n,i,j} a[n,:,i,j] · b[n,:,i,j]ᵀ`, the weight gradient of [`mix_channels`]
/// (rows follow `a`'s channels, columns `b`'s).
pub fn channel_outer<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Matrix<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return shape_err(format!("channel_outer of {sa} and {sb}"));
    }
    let mut m = Matrix::zeros(sa.c, sb.c);
    for n in 0..sa.n {
        for r in 0..sa.c {
            let pa = a.plane(n, r);
            for col in 0..sb.c {
                let pb = b.plane(n, col);
                let acc: T = pa.iter().zip(pb).map(|(&u, &v)| u * v).sum();
                let cur = m.get(r, col);
                m.set(r, col, cur + acc);
            }
        }
    }
    Ok(m)
}

/// Reduction kind for [`reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    L2Norm,
    L1Norm,
}

/// Reduce over the listed axes (0..4); reduced axes keep size 1.
pub fn reduce<T: Scalar>(x: &Tensor4<T>, op: Reduction, dims: &[usize]) -> Result<Tensor4<T>> {
    let mut keep = [true; 4];
    for &d in dims {
        if d >= 4 {
            return Err(Error::InvalidArgument(format!("reduction axis {d} out of range 0..4")));
        }
        keep[d] = false;
    }
    let s = x.shape().as_array();
    let out_dims: Vec<usize> = (0..4).map(|a| if keep[a] { s[a] } else { 1 }).collect();
    let out_shape = Shape4::new(out_dims[0], out_dims[1], out_dims[2], out_dims[3]);
    let mut acc = vec![T::zero(); out_shape.numel()];
    let count = (0..4).filter(|&a| !keep[a]).map(|a| s[a]).product::<usize>();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let v = x.get(n, c, i, j);
                    let idx = [n, c, i, j];
                    let o = (0..4).fold(0, |o, a| o * out_dims[a] + if keep[a] { idx[a] } else { 0 });
                    acc[o] += match op {
                        Reduction::Sum | Reduction::Mean => v,
                        Reduction::L2Norm => v * v,
                        Reduction::L1Norm => v.abs(),
                    };
                }
            }
        }
    }
    match op {
        Reduction::Mean => {
            let k = T::c(count as f64);
            acc.iter_mut().for_each(|v| *v /= k);
        }
        Reduction::L2Norm => acc.iter_mut().for_each(|v| *v = v.sqrt()),
        _ => {}
    }
    Tensor4::from_vec(out_shape, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_tensor(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(Tensor4::<f32>::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor4::<f32>::from_vec(Shape4::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn layout_is_nchw_row_major() {
        let t = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 4, 5), |n, c, i, j| {
            (n * 1000 + c * 100 + i * 10 + j) as f64
        });
        assert_eq!(t.data()[t.offset(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[5], 10.0);
        assert_eq!(t.data()[20], 100.0);
    }

    #[test]
    fn mix_identity_and_scalar() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 2, 2), |n, c, i, j| {
            (n + 2 * c + 3 * i + 5 * j) as f64
        });
        assert_eq!(mix_channels(&x, &Matrix::identity(3)).unwrap(), x);

        let ones = Tensor4::<f64>::full(Shape4::new(1, 1, 2, 2), 1.0);
        let two = Matrix::from_rows(&[vec![2.0]]);
        assert_eq!(mix_channels(&ones, &two).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn mix_rejects_channel_mismatch() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 2, 2, 2));
        assert!(matches!(
            mix_channels(&x, &Matrix::identity(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reductions() {
        let m = reduce(&vec_tensor(&[1.0, 3.0]), Reduction::Mean, &[3]).unwrap();
        assert_eq!(m.data(), &[2.0]);
        let l2 = reduce(&vec_tensor(&[3.0, 4.0]), Reduction::L2Norm, &[3]).unwrap();
        assert_eq!(l2.data(), &[5.0]);
        let l1 = reduce(&vec_tensor(&[3.0, -4.0]), Reduction::L1Norm, &[3]).unwrap();
        assert_eq!(l1.data(), &[7.0]);
        let z = reduce(&vec_tensor(&[0.0; 6]), Reduction::Sum, &[0, 1, 2, 3]).unwrap();
        assert_eq!(z.data(), &[0.0]);
        assert!(reduce(&vec_tensor(&[1.0]), Reduction::Sum, &[4]).is_err());
    }

    #[test]
    fn reduce_keeps_unreduced_axes() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 2, 2), |n, c, _, _| (n * 10 + c) as f64);
        let r = reduce(&x, Reduction::Mean, &[2, 3]).unwrap();
        assert_eq!(r.shape(), Shape4::new(2, 3, 1, 1));
        assert_eq!(r.get(1, 2, 0, 0), 12.0);
        let r = reduce(&x, Reduction::Sum, &[1]).unwrap();
        assert_eq!(r.shape(), Shape4::new(2, 1, 2, 2));
        assert_eq!(r.get(1, 0, 1, 1), 33.0);
    }

    #[test]
    fn concat_and_slice_channels() {
        let a = Tensor4::<f64>::from_fn(Shape4::new(2, 1, 2, 2), |n, _, i, j| (n * 4 + i * 2 + j) as f64);
        let b = a.scale(-1.0);
        let cat = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape4::new(2, 2, 2, 2));
        assert_eq!(cat.channels(0, 1).unwrap(), a);
        assert_eq!(cat.channels(1, 1).unwrap(), b);
        assert!(cat.channels(1, 2).is_err());
    }

    proptest! {
        #[test]
        fn mix_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape4::new(2, 3, 3, 4);
            let x = Tensor4::<f64>::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0));
            let y = Tensor4::<f64>::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0));
            let w = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let mut comb = x.scale(a);
            comb.add_scaled(&y, b).unwrap();
            let lhs = mix_channels(&comb, &w).unwrap();
            let mut rhs = mix_channels(&x, &w).unwrap().scale(a);
            rhs.add_scaled(&mix_channels(&y, &w).unwrap(), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }
}
