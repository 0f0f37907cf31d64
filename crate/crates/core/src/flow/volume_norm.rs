use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

use super::Phase;

/// Axis along which volume normalization takes its mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VnAxis {
    /// Mean over channels at each pixel (CVN).
    Channel,
    /// Mean over pixels in each channel (SVN).
    Spatial,
}

impl VnAxis {
    pub fn parse(s: &str) -> Option<Option<Self>> {
        match s {
            "channel" | "cvn" => Some(Some(Self::Channel)),
            "spatial" | "svn" => Some(Some(Self::Spatial)),
            "none" | "off" => Some(None),
            _ => None,
        }
    }

    pub fn name(axis: Option<Self>) -> &'static str {
        match axis {
            Some(Self::Channel) => "channel",
            Some(Self::Spatial) => "spatial",
            None => "none",
        }
    }

    /// Broadcast shape of the per-sample mean for an input of shape `s`.
    fn stat_shape(self, s: Shape4) -> Shape4 {
        match self {
            Self::Channel => Shape4::new(s.n, 1, s.h, s.w),
            Self::Spatial => Shape4::new(s.n, s.c, 1, 1),
        }
    }
}

/// Mean-subtraction normalizer with a running mean for evaluation.
///
/// Training statistics are taken per sample, so each sample's output has
/// exactly zero mean along the axis; the running mean tracks the batch
/// average of those statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeNormState<T> {
    pub axis: VnAxis,
    pub momentum: T,
    /// `(1, 1, h, w)` for CVN, `(1, c, 1, 1)` for SVN; `None` until the first
    /// training pass, which evaluates as an all-zero running mean.
    pub running_mean: Option<Tensor4<T>>,
}

impl<T: Scalar> VolumeNormState<T> {
    pub fn new(axis: VnAxis) -> Self {
        Self {
            axis,
            momentum: T::c(0.1),
            running_mean: None,
        }
    }

    /// Per-sample mean along the normalized axis, in broadcast shape.
    pub fn sample_mean(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let s = x.shape();
        let mut m = Tensor4::zeros(self.axis.stat_shape(s));
        let p = s.plane();
        match self.axis {
            VnAxis::Channel => {
                let mut acc = vec![0.0f64; p];
                for n in 0..s.n {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for c in 0..s.c {
                        for (a, &v) in acc.iter_mut().zip(x.plane(n, c)) {
                            *a += v.to_f64_lossy();
                        }
                    }
                    for (d, a) in m.plane_mut(n, 0).iter_mut().zip(&acc) {
                        *d = T::c(a / s.c as f64);
                    }
                }
            }
            VnAxis::Spatial => {
                for n in 0..s.n {
                    for c in 0..s.c {
                        let total: f64 = x.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum();
                        m.set(n, c, 0, 0, T::c(total / p as f64));
                    }
                }
            }
        }
        m
    }

    /// `x − m` with `m` broadcast along the normalized axis; `m` has batch 1 or `x.n`.
    fn subtract(&self, x: &Tensor4<T>, m: &Tensor4<T>) -> Tensor4<T> {
        let s = x.shape();
        let mut y = x.clone();
        let p = s.plane();
        for n in 0..s.n {
            let mn = if m.shape().n == 1 { 0 } else { n };
            for c in 0..s.c {
                let dst = y.plane_mut(n, c);
                match self.axis {
                    VnAxis::Channel => {
                        for (d, &v) in dst.iter_mut().zip(m.plane(mn, 0)) {
                            *d -= v;
                        }
                    }
                    VnAxis::Spatial => {
                        let v = m.get(mn, c, 0, 0);
                        dst[..p].iter_mut().for_each(|d| *d -= v);
                    }
                }
            }
        }
        y
    }

    fn check_running(&self, s: Shape4) -> Result<()> {
        if let Some(r) = &self.running_mean {
            let expect = self.axis.stat_shape(s).with_n(1);
            if r.shape() != expect {
                return shape_err(format!(
                    "running mean {} incompatible with input {s} (expected {expect})",
                    r.shape()
                ));
            }
        }
        Ok(())
    }

    /// Normalize without touching the running mean. In training, also returns
    /// the batch-averaged statistic that [`Self::update_running`] consumes.
    pub fn apply(&self, x: &Tensor4<T>, phase: Phase) -> Result<(Tensor4<T>, Option<Tensor4<T>>)> {
        self.check_running(x.shape())?;
        match phase {
            Phase::Train => {
                let m = self.sample_mean(x);
                let y = self.subtract(x, &m);
                let s = m.shape();
                let mut stat = Tensor4::zeros(s.with_n(1));
                let k = T::c(1.0 / s.n as f64);
                let per = stat.len();
                for n in 0..s.n {
                    for (d, &v) in stat.data_mut().iter_mut().zip(&m.data()[n * per..(n + 1) * per]) {
                        *d += k * v;
                    }
                }
                Ok((y, Some(stat)))
            }
            Phase::Eval => match &self.running_mean {
                Some(r) => Ok((self.subtract(x, r), None)),
                None => Ok((x.clone(), None)),
            },
        }
    }

    /// `running ← (1 − β)·running + β·stat`.
    pub fn update_running(&mut self, stat: &Tensor4<T>) -> Result<()> {
        let beta = self.momentum;
        match &mut self.running_mean {
            Some(r) => {
                r.check_same_shape(stat)?;
                for (a, &b) in r.data_mut().iter_mut().zip(stat.data()) {
                    *a = (T::one() - beta) * *a + beta * b;
                }
            }
            None => self.running_mean = Some(stat.scale(beta)),
        }
        Ok(())
    }

    /// Normalize and, in training, fold the batch statistic into the running mean.
    pub fn normalize(&mut self, x: &Tensor4<T>, phase: Phase) -> Result<Tensor4<T>> {
        let (y, stat) = self.apply(x, phase)?;
        if let Some(stat) = stat {
            self.update_running(&stat)?;
        }
        Ok(y)
    }

    /// Vector-Jacobian product of [`Self::apply`]: training mode projects out
    /// the per-sample mean, evaluation mode is a pure shift.
    pub fn backward(&self, grad: &Tensor4<T>, phase: Phase) -> Tensor4<T> {
        match phase {
            Phase::Train => self.subtract(grad, &self.sample_mean(grad)),
            Phase::Eval => grad.clone(),
        }
    }
}
