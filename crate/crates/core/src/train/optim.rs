use crate::autodiff::GradientSet;
use crate::error::{Error, Result};
use crate::model::{NamedTensor, PyramidFlowModel};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-4,
            weight_decay: 1e-5,
            grad_clip: 1.0,
        }
    }
}

/// Adam moments keyed by parameter name, with decoupled multiplicative decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<(String, Vec<T>, Vec<T>)>,
}

/// Scale `grads` so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradientSet<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::c(max_norm / norm));
    }
    norm
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    fn slot(&mut self, name: &str, len: usize) -> usize {
        match self.moments.iter().position(|(n, _, _)| n == name) {
            Some(i) => i,
            None => {
                self.moments.push((name.to_string(), vec![T::zero(); len], vec![T::zero(); len]));
                self.moments.len() - 1
            }
        }
    }

    /// One update of every model parameter. Parameters without a gradient
    /// entry are treated as having zero gradient.
    pub fn apply(&mut self, model: &mut PyramidFlowModel<T>, grads: &GradientSet<T>) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::c(c.lr);
        let decay = T::c(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(t));
        let bc2 = T::c(1.0 - c.beta2.powi(t));
        let eps = T::c(c.eps);
        let mut err = None;
        let mut names = Vec::new();
        model.for_each_parameter_mut(|name, data| names.push((name.to_string(), data.len())));
        let slots: Vec<usize> = names.iter().map(|(n, len)| self.slot(n, *len)).collect();
        let mut k = 0;
        let moments = &mut self.moments;
        model.for_each_parameter_mut(|name, data| {
            let (_, m, v) = &mut moments[slots[k]];
            k += 1;
            let g = grads.get(name);
            if let Some(g) = g {
                if g.len() != data.len() {
                    err = Some(Error::Shape(format!("gradient for {name} has {} entries, parameter {}", g.len(), data.len())));
                    return;
                }
            }
            for i in 0..data.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                data[i] *= decay;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// `opt.step`, then `opt.m.<name>` and `opt.v.<name>` per parameter.
    pub fn to_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out = vec![NamedTensor {
            name: "opt.step".into(),
            dims: vec![1],
            data: vec![T::c(self.step as f64)],
        }];
        for (name, m, _) in &self.moments {
            out.push(NamedTensor { name: format!("opt.m.{name}"), dims: vec![m.len()], data: m.clone() });
        }
        for (name, _, v) in &self.moments {
            out.push(NamedTensor { name: format!("opt.v.{name}"), dims: vec![v.len()], data: v.clone() });
        }
        out
    }

    /// Inverse of [`Self::to_tensors`]; ignores tensors outside the `opt.` namespace.
    pub fn from_tensors(config: AdamConfig, tensors: &[NamedTensor<T>]) -> Result<Self> {
        let mut state = Self::new(config);
        for t in tensors {
            if t.name == "opt.step" {
                let v = t.data.first().ok_or_else(|| Error::State("empty opt.step".into()))?;
                state.step = v.to_f64_lossy() as u64;
            } else if let Some(name) = t.name.strip_prefix("opt.m.") {
                let i = state.slot(name, t.data.len());
                state.moments[i].1 = t.data.clone();
            }
        }
        for t in tensors {
            if let Some(name) = t.name.strip_prefix("opt.v.") {
                let i = state
                    .moments
                    .iter()
                    .position(|(n, _, _)| n == name)
                    .ok_or_else(|| Error::State(format!("second moment without first for {name}")))?;
                if t.data.len() != state.moments[i].1.len() {
                    return Err(Error::State(format!("moment sizes differ for {name}")));
                }
                state.moments[i].2 = t.data.clone();
            }
        }
        Ok(state)
    }
}
