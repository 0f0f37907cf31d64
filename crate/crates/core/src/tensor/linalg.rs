use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Small dense row-major matrix (channel-mixing weights, PLU factors).
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// # Panics
    /// On ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("{rows}x{cols} matrix from {} values", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == T::zero() {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c) * v[c]).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::c(v.to_f64_lossy())).collect(),
        }
    }
}

/// LU factorization with partial pivoting: `A = Pᵀ·L·U` where `perm[i]` is
/// the original row moved to position `i`.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    pub perm: Vec<usize>,
    /// Unit lower triangular.
    pub l: Matrix<T>,
    pub u: Matrix<T>,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return shape_err(format!("LU of non-square {}x{}", n, a.cols()));
        }
        let mut u = a.clone();
        let mut l = Matrix::identity(n);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| u.get(i, k).abs().partial_cmp(&u.get(j, k).abs()).unwrap())
                .unwrap_or(k);
            if u.get(p, k) == T::zero() {
                return Err(Error::Numeric("singular matrix in LU".into()));
            }
            if p != k {
                for c in 0..n {
                    let (a1, a2) = (u.get(k, c), u.get(p, c));
                    u.set(k, c, a2);
                    u.set(p, c, a1);
                }
                for c in 0..k {
                    let (a1, a2) = (l.get(k, c), l.get(p, c));
                    l.set(k, c, a2);
                    l.set(p, c, a1);
                }
                perm.swap(k, p);
            }
            for r in k + 1..n {
                let f = u.get(r, k) / u.get(k, k);
                l.set(r, k, f);
                for c in k..n {
                    let v = u.get(r, c) - f * u.get(k, c);
                    u.set(r, c, v);
                }
            }
        }
        Ok(Self { perm, l, u })
    }

    /// The permutation as a matrix `P` with `A = P·L·U`.
    pub fn permutation_matrix(&self) -> Matrix<T> {
        let n = self.perm.len();
        let mut p = Matrix::zeros(n, n);
        for (i, &src) in self.perm.iter().enumerate() {
            p.set(src, i, T::one());
        }
        p
    }
}

/// Solve `L·x = b` for lower-triangular `L`; `unit` treats the diagonal as ones.
pub(crate) fn solve_lower<T: Scalar>(l: &Matrix<T>, b: &[T], unit: bool) -> Vec<T> {
    let n = b.len();
    let mut x = vec![T::zero(); n];
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l.get(i, j) * x[j];
        }
        x[i] = if unit { acc } else { acc / l.get(i, i) };
    }
    x
}

/// Solve `U·x = b` for upper-triangular `U`.
pub(crate) fn solve_upper<T: Scalar>(u: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = b.len();
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= u.get(i, j) * x[j];
        }
        x[i] = acc / u.get(i, i);
    }
    x
}

/// Random `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), by
/// Gram-Schmidt with re-orthogonalization on a Gaussian draw.
pub fn random_orthogonal<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix<T>> {
    if cols > rows {
        return Err(Error::Config(format!(
            "cannot draw {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &q {
                let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Ok(Matrix::from_fn(rows, cols, |r, c| T::c(q[c][r])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(r, c) in &[(3, 3), (16, 3), (8, 1), (24, 24)] {
            let q: Matrix<f64> = random_orthogonal(r, c, &mut rng).unwrap();
            let qtq = q.transpose().matmul(&q).unwrap();
            assert!(qtq.max_abs_diff(&Matrix::identity(c)) < 1e-12);
        }
        assert!(random_orthogonal::<f64, _>(2, 3, &mut rng).is_err());
    }

    #[test]
    fn lu_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::<f64>::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let lu = Lu::factor(&a).unwrap();
        let back = lu.permutation_matrix().matmul(&lu.l).unwrap().matmul(&lu.u).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
        for r in 0..5 {
            assert_eq!(lu.l.get(r, r), 1.0);
            for c in 0..r {
                assert_eq!(lu.u.get(r, c), 0.0);
            }
        }
        assert!(Lu::factor(&Matrix::<f64>::zeros(2, 2)).is_err());
    }

    #[test]
    fn triangular_solves() {
        let l = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 4.0]]);
        let x = solve_lower(&l, &[2.0, 9.0], false);
        assert_eq!(x, vec![1.0, 2.0]);
        let u = Matrix::from_rows(&[vec![1.0, 3.0], vec![0.0, 2.0]]);
        assert_eq!(solve_upper(&u, &[7.0, 4.0]), vec![1.0, 2.0]);
    }
}
