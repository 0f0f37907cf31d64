use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv3x3, conv3x3_backward, Tensor4};

use super::{Phase, VnAxis, VolumeNormState};

/// Soft-clamp slope; approximates 2/π so the clamp saturates near `clamp`.
pub const ATAN_SCALE: f64 = 0.636;

/// Two 3×3 convolutions around a rectifier that estimate the affine scale
/// `s` and shift `t` from conditioning features. The output convolution
/// starts at zero, so a fresh net yields `s = t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParamNet<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub hidden: usize,
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub clamp: T,
    pub vn: Option<VolumeNormState<T>>,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AffineNetCache<T> {
    pub cond: Tensor4<T>,
    pub pre_act: Tensor4<T>,
    pub raw_scale: Tensor4<T>,
}

impl<T: Scalar> AffineNetCache<T> {
    pub fn bytes(&self) -> usize {
        self.cond.bytes() + self.pre_act.bytes() + self.raw_scale.bytes()
    }
}

/// Output of [`AffineParamNet::forward`].
#[derive(Clone, Debug)]
pub struct AffineParams<T> {
    pub s: Tensor4<T>,
    pub t: Tensor4<T>,
    /// Batch statistic for the running mean (training only).
    pub stat: Option<Tensor4<T>>,
    pub cache: AffineNetCache<T>,
}

/// Parameter gradients of [`AffineParamNet`].
#[derive(Clone, Debug)]
pub struct AffineNetGrads<T> {
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub cond: Tensor4<T>,
}

impl<T: Scalar> AffineParamNet<T> {
    /// Hidden width `2·c_out`; first layer uniformly initialized with bound
    /// `1/√fan_in`, second layer zero.
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, vn: Option<VnAxis>, rng: &mut R) -> Self {
        let hidden = 2 * c_out;
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        let conv1_w = (0..hidden * c_in * 9)
            .map(|_| T::c(rng.gen_range(-bound..bound)))
            .collect();
        let conv1_b = (0..hidden).map(|_| T::c(rng.gen_range(-bound..bound))).collect();
        Self {
            c_in,
            c_out,
            hidden,
            conv1_w,
            conv1_b,
            conv2_w: vec![T::zero(); 2 * c_out * hidden * 9],
            conv2_b: vec![T::zero(); 2 * c_out],
            clamp: T::c(2.0),
            vn: vn.map(VolumeNormState::new),
        }
    }

    /// `(s, t)` from conditioning features; `s` is soft-clamped by
    /// `clamp·0.636·atan(s₀/clamp)` and then volume-normalized.
    pub fn forward(&self, cond: &Tensor4<T>, phase: Phase) -> Result<AffineParams<T>> {
        if cond.shape().c != self.c_in {
            return Err(Error::Shape(format!(
                "affine net expects {} conditioning channels, got {}",
                self.c_in,
                cond.shape().c
            )));
        }
        let pre_act = conv3x3(cond, &self.conv1_w, &self.conv1_b, self.hidden)?;
        let act = pre_act.map(|v| v.max(T::zero()));
        let out = conv3x3(&act, &self.conv2_w, &self.conv2_b, 2 * self.c_out)?;
        let raw_scale = out.channels(0, self.c_out)?;
        let t = out.channels(self.c_out, self.c_out)?;
        let k = T::c(ATAN_SCALE);
        let clamp = self.clamp;
        let clamped = raw_scale.map(|v| clamp * k * (v / clamp).atan());
        let (s, stat) = match &self.vn {
            Some(vn) => vn.apply(&clamped, phase)?,
            None => (clamped, None),
        };
        Ok(AffineParams {
            s,
            t,
            stat,
            cache: AffineNetCache {
                cond: cond.clone(),
                pre_act,
                raw_scale,
            },
        })
    }

    pub fn backward(
        &self,
        cache: &AffineNetCache<T>,
        grad_s: &Tensor4<T>,
        grad_t: &Tensor4<T>,
        phase: Phase,
    ) -> Result<AffineNetGrads<T>> {
        let g_clamped = match &self.vn {
            Some(vn) => vn.backward(grad_s, phase),
            None => grad_s.clone(),
        };
        let k = T::c(ATAN_SCALE);
        let clamp = self.clamp;
        let g_raw = g_clamped.zip_map(&cache.raw_scale, |g, v| {
            let r = v / clamp;
            g * k / (T::one() + r * r)
        })?;
        let g_out = Tensor4::concat_channels(&[&g_raw, grad_t])?;
        let act = cache.pre_act.map(|v| v.max(T::zero()));
        let g2 = conv3x3_backward(&act, &self.conv2_w, &g_out)?;
        let g_pre = g2
            .input
            .zip_map(&cache.pre_act, |g, v| if v > T::zero() { g } else { T::zero() })?;
        let g1 = conv3x3_backward(&cache.cond, &self.conv1_w, &g_pre)?;
        Ok(AffineNetGrads {
            conv1_w: g1.weight,
            conv1_b: g1.bias,
            conv2_w: g2.weight,
            conv2_b: g2.bias,
            cond: g1.input,
        })
    }
}

/// `y = exp(s)⊙x + t`.
pub fn affine_forward<T: Scalar>(x: &Tensor4<T>, s: &Tensor4<T>, t: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_finite(s)?;
    let mut y = x.zip_map(s, |a, b| a * b.exp())?;
    y.add_assign(t)?;
    Ok(y)
}

/// `x = exp(−s)⊙(y − t)`.
pub fn affine_inverse<T: Scalar>(y: &Tensor4<T>, s: &Tensor4<T>, t: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_finite(s)?;
    y.sub(t)?.zip_map(s, |a, b| a * (-b).exp())
}

/// Log-determinant of the elementwise affine map: `Σ s`.
pub fn affine_logdet<T: Scalar>(s: &Tensor4<T>) -> T {
    T::c(s.data().iter().map(|v| v.to_f64_lossy()).sum())
}

fn check_finite<T: Scalar>(s: &Tensor4<T>) -> Result<()> {
    if s.data().iter().any(|v| !v.is_finite() || v.exp().is_infinite()) {
        return Err(Error::NonFinite("affine scale overflows exp()".into()));
    }
    Ok(())
}
