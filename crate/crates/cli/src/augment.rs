//! Exact pixel-permutation augmentation: flips and quarter turns.

use rand::Rng;

use pyramidflow::tensor::Tensor4;
use pyramidflow::Scalar;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Chance of a rotation by `k·90°`, `k` uniform in `0..4`.
    pub p_rotate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rotate: 0.5,
        }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        p_hflip: 0.0,
        p_vflip: 0.0,
        p_rotate: 0.0,
    };
}

pub fn hflip<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let w = x.shape().w;
    Tensor4::from_fn(x.shape(), |n, c, i, j| x.get(n, c, i, w - 1 - j))
}

pub fn vflip<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let h = x.shape().h;
    Tensor4::from_fn(x.shape(), |n, c, i, j| x.get(n, c, h - 1 - i, j))
}

/// Counter-clockwise quarter turns of a square image.
pub fn rot90<T: Scalar>(x: &Tensor4<T>, k: usize) -> Tensor4<T> {
    let s = x.shape();
    let m = s.h - 1;
    match k % 4 {
        0 => x.clone(),
        1 => Tensor4::from_fn(s, |n, c, i, j| x.get(n, c, j, m - i)),
        2 => Tensor4::from_fn(s, |n, c, i, j| x.get(n, c, m - i, m - j)),
        _ => Tensor4::from_fn(s, |n, c, i, j| x.get(n, c, m - j, i)),
    }
}

pub fn augment<T: Scalar, R: Rng + ?Sized>(x: &Tensor4<T>, cfg: &AugmentConfig, rng: &mut R) -> CliResult<Tensor4<T>> {
    let s = x.shape();
    if cfg.p_rotate > 0.0 && s.h != s.w {
        return Err(CliError::Data(format!("rotation needs a square image, got {}x{}", s.h, s.w)));
    }
    let mut out = x.clone();
    if rng.gen_bool(cfg.p_hflip) {
        out = hflip(&out);
    }
    if rng.gen_bool(cfg.p_vflip) {
        out = vflip(&out);
    }
    if rng.gen_bool(cfg.p_rotate) {
        out = rot90(&out, rng.gen_range(0..4));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyramidflow::tensor::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize) -> Tensor4<f64> {
        Tensor4::from_fn(Shape4::new(1, 2, h, w), |_, c, i, j| (c * 100 + i * 10 + j) as f64)
    }

    #[test]
    fn disabled_is_identity() {
        let x = img(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(augment(&x, &AugmentConfig::NONE, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn flips_are_involutions_and_rotations_compose() {
        let x = img(4, 4);
        assert_eq!(hflip(&hflip(&x)), x);
        assert_eq!(vflip(&vflip(&x)), x);
        assert_eq!(rot90(&rot90(&x, 1), 3), x);
        assert_eq!(rot90(&x, 2), hflip(&vflip(&x)));
        assert_eq!(rot90(&x, 1).get(0, 0, 0, 0), x.get(0, 0, 0, 3));
    }

    #[test]
    fn output_is_a_permutation() {
        let x = img(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = augment(&x, &AugmentConfig::default(), &mut rng).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn reproducible_and_rejects_non_square_rotation() {
        let x = img(4, 4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..8).map(|_| augment(&x, &AugmentConfig::default(), &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(augment(&img(4, 6), &AugmentConfig::default(), &mut rng).is_err());
        let flips_only = AugmentConfig { p_rotate: 0.0, ..AugmentConfig::default() };
        assert!(augment(&img(4, 6), &flips_only, &mut rng).is_ok());
    }
}
