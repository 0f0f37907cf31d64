//! The assembled flow: channel lift, pyramid decomposition and a depth × level
//! grid of dual coupling blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BlockTape, GradientSet, TapeMode};
use crate::error::{shape_err, Error, Result};
use crate::flow::{DualCouplingBlock, FlowBlock, Phase, VnAxis};
use crate::pyramid::{decompose, PyramidStack};
use crate::scalar::Scalar;
use crate::tensor::linalg::{solve_lower, solve_upper};
use crate::tensor::{mix_channels, random_orthogonal, Lu, Matrix, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Pyramid levels `L`.
    pub levels: usize,
    /// Depth steps `D`; each sweeps all `L` level positions.
    pub depth: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Image channels.
    pub c_in: usize,
    pub vn: Option<VnAxis>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            depth: 4,
            channels: 16,
            c_in: 3,
            vn: Some(VnAxis::Channel),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.depth == 0 {
            return Err(Error::Config("levels and depth must be at least 1".into()));
        }
        if self.c_in == 0 || self.channels < self.c_in {
            return Err(Error::Config(format!(
                "feature channels C={} must be at least c_in={} (and c_in ≥ 1)",
                self.channels, self.c_in
            )));
        }
        Ok(())
    }

    /// Images must have sides divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// A named tensor in the model's state.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFlowModel<T> {
    pub config: ModelConfig,
    /// `C × c_in` lift with orthonormal columns at initialization.
    pub w: Matrix<T>,
    /// Grid in execution order: depth-major, then level.
    pub blocks: Vec<DualCouplingBlock<T>>,
}

impl<T: Scalar> PyramidFlowModel<T> {
    /// Deterministic in `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = random_orthogonal(config.channels, config.c_in, &mut rng)?;
        let unconditional = config.levels == 1;
        let mut blocks = Vec::with_capacity(config.depth * config.levels);
        for _ in 0..config.depth {
            for level in 0..config.levels {
                blocks.push(DualCouplingBlock::new(
                    level,
                    config.levels,
                    config.channels,
                    config.vn,
                    unconditional,
                    &mut rng,
                )?);
            }
        }
        Ok(Self { config, w, blocks })
    }

    /// `depth{i}.level{d}` for grid position `index`.
    pub fn block_prefix(&self, index: usize) -> String {
        format!("depth{}.level{}", index / self.config.levels, index % self.config.levels)
    }

    fn check_image(&self, image: &Tensor4<T>) -> Result<()> {
        let s = image.shape();
        let m = self.config.size_multiple();
        if s.c != self.config.c_in {
            return shape_err(format!("model expects {} image channels, got {}", self.config.c_in, s.c));
        }
        if s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0 {
            return shape_err(format!(
                "image {}x{} is not divisible by {m} for {} levels",
                s.h, s.w, self.config.levels
            ));
        }
        Ok(())
    }

    /// `x = W·image`.
    pub fn lift(&self, image: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_image(image)?;
        mix_channels(image, &self.w)
    }

    /// Pre-flow pyramid of an image.
    pub fn encode(&self, image: &Tensor4<T>) -> Result<PyramidStack<T>> {
        decompose(&self.lift(image)?, self.config.levels)
    }

    /// Latent pyramid. Never mutates running statistics.
    pub fn forward(&self, image: &Tensor4<T>, phase: Phase) -> Result<PyramidStack<T>> {
        Ok(self.forward_with_logdet(image, phase)?.0)
    }

    /// Latent pyramid and the summed block logdet (the lift is excluded).
    pub fn forward_with_logdet(&self, image: &Tensor4<T>, phase: Phase) -> Result<(PyramidStack<T>, T)> {
        let mut z = self.encode(image)?;
        let mut logdet = T::zero();
        for b in &self.blocks {
            let step = b.forward(&z, phase, false)?;
            logdet += step.logdet;
            z = step.output;
        }
        Ok((z, logdet))
    }

    /// Pre-flow feature `x` for a latent pyramid.
    pub fn inverse(&self, latents: &PyramidStack<T>, phase: Phase) -> Result<Tensor4<T>> {
        if latents.num_levels() != self.config.levels || latents.base_shape().c != self.config.channels {
            return shape_err(format!(
                "latents with {} levels and {} channels do not fit a model with {} levels and {} channels",
                latents.num_levels(),
                latents.base_shape().c,
                self.config.levels,
                self.config.channels
            ));
        }
        let mut z = latents.clone();
        for b in self.blocks.iter().rev() {
            z = b.inverse(&z, phase)?;
        }
        Ok(crate::pyramid::compose(&z))
    }

    /// Per-pixel least squares `argmin_I ‖W·I − x‖²` via the normal equations.
    pub fn unlift(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let wt = self.w.transpose();
        let gram = wt.matmul(&self.w)?;
        let lu = Lu::factor(&gram)?;
        let n = gram.rows();
        let degenerate = (0..n).any(|i| lu.u.get(i, i).abs() <= T::c(1e-12) * T::c(n as f64));
        if degenerate {
            return Err(Error::Numeric("lift matrix is rank deficient".into()));
        }
        let rhs = mix_channels(x, &wt)?;
        let s = rhs.shape();
        let pt = lu.permutation_matrix().cast::<T>().transpose();
        let l = lu.l.clone();
        let mut out = Tensor4::zeros(s);
        let mut pix = vec![T::zero(); n];
        for b in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    for (k, v) in pix.iter_mut().enumerate() {
                        *v = rhs.get(b, k, i, j);
                    }
                    let y = solve_upper(&lu.u, &solve_lower(&l, &pt.matvec(&pix), true));
                    for (k, &v) in y.iter().enumerate() {
                        out.set(b, k, i, j, v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Image whose lift best matches the pre-flow feature of `latent_means`.
    pub fn image_template(&self, latent_means: &PyramidStack<T>) -> Result<Tensor4<T>> {
        self.unlift(&self.inverse(latent_means, Phase::Eval)?)
    }

    /// Run a tape over the block grid on a lifted pyramid; gradients are renamed
    /// to checkpoint names.
    pub fn tape(&mut self, mode: TapeMode) -> BlockTape<'_, T, DualCouplingBlock<T>> {
        BlockTape::new(&mut self.blocks, mode)
    }

    /// Rename `block{i}.<param>` entries to `depth{i}.level{d}.<param>`.
    pub fn rename_block_grads(&self, grads: GradientSet<T>) -> GradientSet<T> {
        let mut out = GradientSet::new();
        for (name, g) in grads.iter() {
            let renamed = name
                .strip_prefix("block")
                .and_then(|rest| rest.split_once('.'))
                .and_then(|(idx, param)| idx.parse::<usize>().ok().map(|i| format!("{}.{param}", self.block_prefix(i))))
                .unwrap_or_else(|| name.to_string());
            out.insert(renamed, g.to_vec());
        }
        out
    }

    /// Trainable tensors in a fixed order: `W`, then each block's parameters.
    pub fn parameters(&self) -> Vec<NamedTensor<T>> {
        let mut out = vec![NamedTensor {
            name: "W".into(),
            dims: vec![self.w.rows(), self.w.cols()],
            data: self.w.data().to_vec(),
        }];
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = self.block_prefix(i);
            for p in b.parameters() {
                out.push(NamedTensor {
                    name: format!("{prefix}.{}", p.name),
                    dims: p.dims,
                    data: p.data.to_vec(),
                });
            }
        }
        out
    }

    /// Visit every trainable slice mutably with its name, in [`Self::parameters`] order.
    pub fn for_each_parameter_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        f("W", self.w.data_mut());
        let levels = self.config.levels;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("depth{}.level{}", i / levels, i % levels);
            for p in b.parameters_mut() {
                f(&format!("{prefix}.{}", p.name), p.data);
            }
        }
    }

    /// Non-trainable state: permutations and running means. An uninitialized
    /// running mean has dims `[0]`.
    pub fn buffers(&self) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = self.block_prefix(i);
            let p = &b.invconv.p;
            out.push(NamedTensor {
                name: format!("{prefix}.invconv.P"),
                dims: vec![p.rows(), p.cols()],
                data: p.data().to_vec(),
            });
            if let Some(vn) = b.vn_state() {
                let (dims, data) = match &vn.running_mean {
                    Some(m) => (m.shape().as_array().to_vec(), m.data().to_vec()),
                    None => (vec![0], Vec::new()),
                };
                out.push(NamedTensor {
                    name: format!("{prefix}.vn.running_mean"),
                    dims,
                    data,
                });
            }
        }
        out
    }

    /// All parameters then all buffers.
    pub fn state(&self) -> Vec<NamedTensor<T>> {
        let mut s = self.parameters();
        s.extend(self.buffers());
        s
    }

    /// Replace the state from `tensors`. Every expected name must be present
    /// with matching dims; unexpected names are rejected.
    pub fn load_state(&mut self, tensors: &[NamedTensor<T>]) -> Result<()> {
        let expected = self.state();
        for t in tensors {
            if !expected.iter().any(|e| e.name == t.name) {
                return Err(Error::State(format!("unknown tensor {:?}", t.name)));
            }
        }
        let find = |name: &str| -> Result<&NamedTensor<T>> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::State(format!("missing tensor {name:?}")))
        };
        for e in &expected {
            let t = find(&e.name)?;
            let running = e.name.ends_with("vn.running_mean");
            if !running && t.dims != e.dims {
                return Err(Error::State(format!(
                    "tensor {:?} has dims {:?}, expected {:?}",
                    e.name, t.dims, e.dims
                )));
            }
            if t.data.len() != t.dims.iter().product::<usize>() {
                return Err(Error::State(format!("tensor {:?} payload does not match its dims", e.name)));
            }
        }
        let mut staged = self.clone();
        staged.for_each_parameter_mut(|name, data| {
            if let Ok(t) = find(name) {
                data.copy_from_slice(&t.data);
            }
        });
        let levels = self.config.levels;
        for (i, b) in staged.blocks.iter_mut().enumerate() {
            let prefix = format!("depth{}.level{}", i / levels, i % levels);
            let p = find(&format!("{prefix}.invconv.P"))?;
            b.invconv.p.data_mut().copy_from_slice(&p.data);
            if let Some(vn) = b.vn_state_mut() {
                let m = find(&format!("{prefix}.vn.running_mean"))?;
                vn.running_mean = match m.dims.as_slice() {
                    [0] => None,
                    [n, c, h, w] => {
                        Some(Tensor4::from_vec(crate::tensor::Shape4::new(*n, *c, *h, *w), m.data.clone())?)
                    }
                    _ => return Err(Error::State(format!("running mean {:?} must be 4-d", m.name))),
                };
            }
        }
        *self = staged;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::InvConv1x1;
    use crate::tensor::Shape4;
    use rand::Rng;

    fn image(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    fn cfg(levels: usize, depth: usize, channels: usize, c_in: usize) -> ModelConfig {
        ModelConfig {
            levels,
            depth,
            channels,
            c_in,
            vn: Some(VnAxis::Channel),
            seed: 3,
        }
    }

    fn perturb(m: &mut PyramidFlowModel<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.for_each_parameter_mut(|name, data| {
            if name != "W" {
                for v in data.iter_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
            }
        });
    }

    #[test]
    fn rejects_narrow_features() {
        assert!(matches!(
            PyramidFlowModel::<f64>::build(cfg(2, 1, 2, 3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn build_is_deterministic_with_orthonormal_lift() {
        let a = PyramidFlowModel::<f64>::build(cfg(3, 2, 8, 3)).unwrap();
        let b = PyramidFlowModel::<f64>::build(cfg(3, 2, 8, 3)).unwrap();
        assert_eq!(a, b);
        let wtw = a.w.transpose().matmul(&a.w).unwrap();
        assert!(wtw.max_abs_diff(&Matrix::identity(3)) < 1e-12);
        assert_eq!(a.blocks.len(), 6);
        assert_eq!(a.blocks.iter().map(|b| b.level).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn identity_model_returns_decomposition() {
        let mut m = PyramidFlowModel::<f64>::build(cfg(3, 2, 4, 3)).unwrap();
        for b in &mut m.blocks {
            b.invconv = InvConv1x1::identity(4, true);
        }
        let img = image(Shape4::new(1, 3, 16, 16), 1);
        let z = m.forward(&img, Phase::Train).unwrap();
        assert_eq!(z, m.encode(&img).unwrap());
        let flat = Tensor4::full(Shape4::new(1, 3, 16, 16), 0.4);
        let zf = m.forward(&flat, Phase::Train).unwrap();
        for d in 0..2 {
            assert!(zf.level(d).max_abs() < 1e-14);
        }
        let zero = PyramidStack::zeros(Shape4::new(1, 4, 16, 16), 3).unwrap();
        assert_eq!(m.image_template(&zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn latent_shapes_and_round_trip() {
        let mut m = PyramidFlowModel::<f64>::build(cfg(3, 2, 6, 3)).unwrap();
        perturb(&mut m, 4);
        let img = image(Shape4::new(2, 3, 16, 8), 5);
        let z = m.forward(&img, Phase::Train).unwrap();
        for d in 0..3 {
            assert_eq!(z.level(d).shape(), Shape4::new(2, 6, 16 >> d, 8 >> d));
        }
        let x = m.inverse(&z, Phase::Train).unwrap();
        assert!(x.max_abs_diff(&m.lift(&img).unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn train_logdet_is_zero() {
        let mut m = PyramidFlowModel::<f64>::build(cfg(3, 2, 4, 3)).unwrap();
        perturb(&mut m, 6);
        let img = image(Shape4::new(2, 3, 16, 16), 7);
        assert!(m.forward_with_logdet(&img, Phase::Train).unwrap().1.abs() < 1e-9);
    }

    #[test]
    fn rejects_indivisible_images() {
        let m = PyramidFlowModel::<f64>::build(cfg(3, 1, 4, 3)).unwrap();
        assert!(matches!(m.forward(&image(Shape4::new(1, 3, 10, 16), 0), Phase::Eval), Err(Error::Shape(_))));
        assert!(matches!(m.forward(&image(Shape4::new(1, 1, 16, 16), 0), Phase::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn unlift_recovers_image_and_is_least_squares() {
        let mut m = PyramidFlowModel::<f64>::build(cfg(2, 1, 5, 3)).unwrap();
        let img = image(Shape4::new(1, 3, 4, 4), 8);
        let back = m.unlift(&m.lift(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
        // a non-orthonormal lift still yields the least-squares solution
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in m.w.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let x = image(Shape4::new(1, 5, 4, 4), 10);
        let best = m.unlift(&x).unwrap();
        let resid = |i: &Tensor4<f64>| mix_channels(i, &m.w).unwrap().sub(&x).unwrap().dot(&mix_channels(i, &m.w).unwrap().sub(&x).unwrap()).unwrap();
        let r0 = resid(&best);
        for k in 0..100 {
            let cand = best.add(&image(Shape4::new(1, 3, 4, 4), 100 + k).map(|v| v - 0.5)).unwrap();
            assert!(r0 <= resid(&cand) + 1e-12);
        }
    }

    #[test]
    fn state_round_trip_and_strictness() {
        let mut a = PyramidFlowModel::<f64>::build(cfg(2, 1, 4, 3)).unwrap();
        perturb(&mut a, 11);
        let img = image(Shape4::new(2, 3, 8, 8), 12);
        let x = a.encode(&img).unwrap();
        a.tape(TapeMode::Reversible).forward(&x, Phase::Train).unwrap();
        assert!(a.blocks[0].vn_state().unwrap().running_mean.is_some());
        let mut b = PyramidFlowModel::<f64>::build(ModelConfig { seed: 99, ..a.config }).unwrap();
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.state(), b.state());
        let mut extra = a.state();
        extra.push(NamedTensor { name: "bogus".into(), dims: vec![1], data: vec![0.0] });
        assert!(b.load_state(&extra).is_err());
        let missing: Vec<_> = a.state().into_iter().filter(|t| t.name != "W").collect();
        assert!(b.load_state(&missing).is_err());
    }

    #[test]
    fn name_inventory_for_baseline_config() {
        let m = PyramidFlowModel::<f32>::build(ModelConfig { levels: 4, depth: 1, channels: 16, c_in: 3, vn: Some(VnAxis::Channel), seed: 0 }).unwrap();
        let names: Vec<String> = m.state().into_iter().map(|t| t.name).collect();
        let mut expected = vec!["W".to_string()];
        for d in 0..4 {
            for p in ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "invconv.L", "invconv.U", "invconv.s"] {
                expected.push(format!("depth0.level{d}.{p}"));
            }
        }
        for d in 0..4 {
            expected.push(format!("depth0.level{d}.invconv.P"));
            expected.push(format!("depth0.level{d}.vn.running_mean"));
        }
        assert_eq!(names, expected);
    }
}
