use rand::Rng;

use crate::error::{Error, Result};
use crate::pyramid::PyramidStack;
use crate::scalar::Scalar;
use crate::tensor::{resize_bilinear, resize_bilinear_adjoint, Tensor4};

use super::{
    affine_forward, affine_inverse, affine_logdet, AffineNetCache, AffineParamNet, BlockStep,
    FlowBlock, InvConv1x1, ParamMut, ParamRef, Phase, VnAxis,
};

/// Transforms one pyramid level affinely, conditioned on its resized
/// neighbors, then mixes its channels with an invertible 1×1 convolution.
/// All other levels pass through untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct DualCouplingBlock<T> {
    pub level: usize,
    /// Conditioning levels, ascending (`level−1` and/or `level+1`).
    pub neighbors: Vec<usize>,
    /// `None` for the unconditional (single-level) variant, which is a pure invconv.
    pub net: Option<AffineParamNet<T>>,
    pub invconv: InvConv1x1<T>,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct DualBlockCache<T> {
    phase: Phase,
    net: Option<(AffineNetCache<T>, Tensor4<T>)>,
    x: Tensor4<T>,
    y: Tensor4<T>,
}

const CONDITIONED_PARAMS: [&str; 7] = [
    "conv1.w",
    "conv1.b",
    "conv2.w",
    "conv2.b",
    "invconv.L",
    "invconv.U",
    "invconv.s",
];

impl<T: Scalar> DualCouplingBlock<T> {
    /// Block at `level` of a `num_levels` pyramid with `channels` features.
    /// A block with no neighbors requires `allow_unconditional`.
    pub fn new<R: Rng + ?Sized>(
        level: usize,
        num_levels: usize,
        channels: usize,
        vn: Option<VnAxis>,
        allow_unconditional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if level >= num_levels {
            return Err(Error::Config(format!(
                "block level {level} outside a {num_levels}-level pyramid"
            )));
        }
        let neighbors: Vec<usize> = [level.checked_sub(1), Some(level + 1)]
            .into_iter()
            .flatten()
            .filter(|&d| d < num_levels)
            .collect();
        if neighbors.is_empty() && !allow_unconditional {
            return Err(Error::Config(format!(
                "block at level {level} has no neighboring levels to condition on and unconditional mode is off"
            )));
        }
        let net = (!neighbors.is_empty())
            .then(|| AffineParamNet::new(channels * neighbors.len(), channels, vn, rng));
        let invconv = InvConv1x1::random(channels, vn.is_some(), rng)?;
        Ok(Self {
            level,
            neighbors,
            net,
            invconv,
            channels,
        })
    }

    /// Same topology as [`Self::new`] but with an identity invconv; the
    /// block is then an exact identity map until trained.
    pub fn identity<R: Rng + ?Sized>(
        level: usize,
        num_levels: usize,
        channels: usize,
        vn: Option<VnAxis>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut b = Self::new(level, num_levels, channels, vn, true, rng)?;
        b.invconv = InvConv1x1::identity(channels, vn.is_some());
        Ok(b)
    }

    fn condition(&self, stack: &PyramidStack<T>) -> Result<Tensor4<T>> {
        let target = stack.level(self.level).shape();
        let resized: Vec<Tensor4<T>> = self
            .neighbors
            .iter()
            .map(|&d| resize_bilinear(stack.level(d), target.h, target.w))
            .collect();
        let parts: Vec<&Tensor4<T>> = resized.iter().collect();
        Tensor4::concat_channels(&parts)
    }

    fn check_stack(&self, stack: &PyramidStack<T>) -> Result<()> {
        let top = self.neighbors.iter().copied().chain([self.level]).max().unwrap_or(0);
        if top >= stack.num_levels() {
            return Err(Error::Shape(format!(
                "block touches level {top} but the pyramid has {} levels",
                stack.num_levels()
            )));
        }
        if stack.base_shape().c != self.channels {
            return Err(Error::Shape(format!(
                "block expects {} channels, pyramid has {}",
                self.channels,
                stack.base_shape().c
            )));
        }
        Ok(())
    }

    /// Scale and shift for the current conditioning levels.
    pub fn affine_params(&self, stack: &PyramidStack<T>, phase: Phase) -> Result<Option<super::AffineParams<T>>> {
        match &self.net {
            Some(net) => Ok(Some(net.forward(&self.condition(stack)?, phase)?)),
            None => Ok(None),
        }
    }

    pub fn parameters(&self) -> Vec<ParamRef<'_, T>> {
        let c = self.channels;
        let mut out = Vec::with_capacity(7);
        if let Some(net) = &self.net {
            out.push(ParamRef { name: "conv1.w", dims: vec![net.hidden, net.c_in, 3, 3], data: &net.conv1_w });
            out.push(ParamRef { name: "conv1.b", dims: vec![net.hidden], data: &net.conv1_b });
            out.push(ParamRef { name: "conv2.w", dims: vec![2 * net.c_out, net.hidden, 3, 3], data: &net.conv2_w });
            out.push(ParamRef { name: "conv2.b", dims: vec![2 * net.c_out], data: &net.conv2_b });
        }
        out.push(ParamRef { name: "invconv.L", dims: vec![c, c], data: self.invconv.l.data() });
        out.push(ParamRef { name: "invconv.U", dims: vec![c, c], data: self.invconv.u.data() });
        out.push(ParamRef { name: "invconv.s", dims: vec![c], data: &self.invconv.s });
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::with_capacity(7);
        if let Some(net) = &mut self.net {
            out.push(ParamMut { name: "conv1.w", data: &mut net.conv1_w });
            out.push(ParamMut { name: "conv1.b", data: &mut net.conv1_b });
            out.push(ParamMut { name: "conv2.w", data: &mut net.conv2_w });
            out.push(ParamMut { name: "conv2.b", data: &mut net.conv2_b });
        }
        out.push(ParamMut { name: "invconv.L", data: self.invconv.l.data_mut() });
        out.push(ParamMut { name: "invconv.U", data: self.invconv.u.data_mut() });
        out.push(ParamMut { name: "invconv.s", data: &mut self.invconv.s });
        out
    }

    /// Running mean of the scale normalizer, if this block has one.
    pub fn vn_state(&self) -> Option<&super::VolumeNormState<T>> {
        self.net.as_ref().and_then(|n| n.vn.as_ref())
    }

    pub fn vn_state_mut(&mut self) -> Option<&mut super::VolumeNormState<T>> {
        self.net.as_mut().and_then(|n| n.vn.as_mut())
    }
}

impl<T: Scalar> FlowBlock<T> for DualCouplingBlock<T> {
    type Cache = DualBlockCache<T>;

    fn forward(&self, x: &PyramidStack<T>, phase: Phase, keep_cache: bool) -> Result<BlockStep<T, Self::Cache>> {
        self.check_stack(x)?;
        let xd = x.level(self.level);
        let s4 = xd.shape();
        let (y, mut logdet, stat, net_cache) = match self.affine_params(x, phase)? {
            Some(p) => {
                let y = affine_forward(xd, &p.s, &p.t)?;
                let ld = affine_logdet(&p.s);
                (y, ld, p.stat, Some((p.cache, p.s)))
            }
            None => (xd.clone(), T::zero(), None, None),
        };
        let z = self.invconv.forward(&y)?;
        logdet += self.invconv.logdet(s4.h, s4.w) * T::c(s4.n as f64);
        let mut output = x.clone();
        output.set_level(self.level, z)?;
        let cache = keep_cache.then(|| DualBlockCache {
            phase,
            net: net_cache,
            x: xd.clone(),
            y,
        });
        Ok(BlockStep {
            output,
            logdet,
            stat,
            cache,
        })
    }

    fn inverse(&self, z: &PyramidStack<T>, phase: Phase) -> Result<PyramidStack<T>> {
        self.check_stack(z)?;
        let y = self.invconv.inverse(z.level(self.level))?;
        let x = match self.affine_params(z, phase)? {
            Some(p) => affine_inverse(&y, &p.s, &p.t)?,
            None => y,
        };
        let mut out = z.clone();
        out.set_level(self.level, x)?;
        Ok(out)
    }

    fn commit_stat(&mut self, stat: &Tensor4<T>) -> Result<()> {
        match self.vn_state_mut() {
            Some(vn) => vn.update_running(stat),
            None => Ok(()),
        }
    }

    fn backward(&self, cache: &Self::Cache, grad: &mut PyramidStack<T>) -> Result<Vec<Vec<T>>> {
        let gz = grad.level(self.level);
        let (ig, gy) = self.invconv.backward(&cache.y, gz)?;
        let mut out = Vec::with_capacity(7);
        let gx = match (&self.net, &cache.net) {
            (Some(net), Some((net_cache, s))) => {
                let es = s.map(|v| v.exp());
                let gx = gy.mul(&es)?;
                let gs = gx.mul(&cache.x)?;
                let ng = net.backward(net_cache, &gs, &gy, cache.phase)?;
                for (k, &d) in self.neighbors.iter().enumerate() {
                    let part = ng.cond.channels(k * self.channels, self.channels)?;
                    let target = grad.level(d).shape();
                    let back = resize_bilinear_adjoint(&part, target.h, target.w);
                    grad.level_mut(d).add_assign(&back)?;
                }
                out.extend([ng.conv1_w, ng.conv1_b, ng.conv2_w, ng.conv2_b]);
                gx
            }
            (None, None) => gy,
            _ => return Err(Error::State("block cache does not match block topology".into())),
        };
        grad.set_level(self.level, gx)?;
        out.extend([ig.l, ig.u, ig.s]);
        Ok(out)
    }

    fn param_names(&self) -> Vec<&'static str> {
        if self.net.is_some() {
            CONDITIONED_PARAMS.to_vec()
        } else {
            CONDITIONED_PARAMS[4..].to_vec()
        }
    }

    fn cache_bytes(cache: &Self::Cache) -> usize {
        cache.x.bytes()
            + cache.y.bytes()
            + cache
                .net
                .as_ref()
                .map_or(0, |(c, s)| c.bytes() + s.bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::decompose;
    use crate::tensor::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stack(base: Shape4, levels: usize, seed: u64) -> PyramidStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor4::from_fn(base, |_, _, _, _| rng.gen_range(-1.0..1.0));
        decompose(&x, levels).unwrap()
    }

    /// Block with every parameter perturbed away from its initialization.
    pub(crate) fn random_block(
        level: usize,
        levels: usize,
        c: usize,
        vn: Option<VnAxis>,
        seed: u64,
    ) -> DualCouplingBlock<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = DualCouplingBlock::new(level, levels, c, vn, true, &mut rng).unwrap();
        for p in b.parameters_mut() {
            let scale = if p.name.starts_with("invconv") { 0.2 } else { 0.3 };
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
        b
    }

    #[test]
    fn zero_init_identity_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = DualCouplingBlock::<f64>::identity(1, 3, 2, Some(VnAxis::Channel), &mut rng).unwrap();
        let x = random_stack(Shape4::new(1, 2, 8, 8), 3, 2);
        let step = b.forward(&x, Phase::Train, false).unwrap();
        assert_eq!(step.output, x);
        assert_eq!(step.logdet, 0.0);
    }

    #[test]
    fn requires_neighbors_unless_unconditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            DualCouplingBlock::<f64>::new(0, 1, 2, None, false, &mut rng),
            Err(Error::Config(_))
        ));
        let b = DualCouplingBlock::<f64>::new(0, 1, 2, None, true, &mut rng).unwrap();
        assert!(b.net.is_none());
        assert_eq!(b.param_names(), vec!["invconv.L", "invconv.U", "invconv.s"]);
        let edge = DualCouplingBlock::<f64>::new(0, 3, 2, None, false, &mut rng).unwrap();
        assert_eq!(edge.neighbors, vec![1]);
        let mid = DualCouplingBlock::<f64>::new(1, 3, 2, None, false, &mut rng).unwrap();
        assert_eq!(mid.neighbors, vec![0, 2]);
    }

    #[test]
    fn neighbors_pass_through_bit_exact() {
        let b = random_block(1, 3, 2, Some(VnAxis::Spatial), 4);
        let x = random_stack(Shape4::new(2, 2, 8, 8), 3, 5);
        let out = b.forward(&x, Phase::Train, false).unwrap().output;
        assert_eq!(out.level(0), x.level(0));
        assert_eq!(out.level(2), x.level(2));
        assert_ne!(out.level(1), x.level(1));
    }

    #[test]
    fn round_trip_all_positions_and_modes() {
        for vn in [None, Some(VnAxis::Channel), Some(VnAxis::Spatial)] {
            for level in 0..3 {
                let mut b = random_block(level, 3, 3, vn, 6 + level as u64);
                let x = random_stack(Shape4::new(2, 3, 8, 8), 3, 7);
                for phase in [Phase::Train, Phase::Eval] {
                    let step = b.forward(&x, phase, false).unwrap();
                    if let Some(stat) = &step.stat {
                        b.commit_stat(stat).unwrap();
                    }
                    let back = b.inverse(&step.output, phase).unwrap();
                    assert!(back.max_abs_diff(&x).unwrap() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn train_logdet_vanishes_under_volume_norm() {
        for vn in [VnAxis::Channel, VnAxis::Spatial] {
            let b = random_block(1, 3, 3, Some(vn), 8);
            let x = random_stack(Shape4::new(2, 3, 16, 16), 3, 9);
            let step = b.forward(&x, Phase::Train, false).unwrap();
            assert!(step.logdet.abs() < 1e-10, "{vn:?}: {}", step.logdet);
        }
    }

    /// log|det ∂z_d/∂x_d| by central differences over every transformed scalar.
    fn brute_logdet(b: &DualCouplingBlock<f64>, x: &PyramidStack<f64>, phase: Phase) -> f64 {
        let d = b.level;
        let n = x.level(d).len();
        let eps = 1e-6;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for col in 0..n {
            let (mut a, mut m) = (x.clone(), x.clone());
            a.level_mut(d).data_mut()[col] += eps;
            m.level_mut(d).data_mut()[col] -= eps;
            let za = b.forward(&a, phase, false).unwrap().output;
            let zm = b.forward(&m, phase, false).unwrap().output;
            for row in 0..n {
                jac[(row, col)] = (za.level(d).data()[row] - zm.level(d).data()[row]) / (2.0 * eps);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn logdet_matches_brute_force_jacobian() {
        // transformed level 1 of a 1×2×4×4 pyramid is 1×2×2×2 = 8 scalars
        let x = random_stack(Shape4::new(1, 2, 4, 4), 2, 10);
        for (k, vn) in [None, Some(VnAxis::Channel)].into_iter().enumerate() {
            let mut b = random_block(1, 2, 2, vn, 11 + k as u64);
            let step = b.forward(&x, Phase::Train, false).unwrap();
            let brute = brute_logdet(&b, &x, Phase::Train);
            assert!((step.logdet - brute).abs() <= 1e-4 * brute.abs().max(1.0), "{} vs {brute}", step.logdet);
            if let Some(stat) = step.stat {
                b.commit_stat(&stat).unwrap();
                let ev = b.forward(&x, Phase::Eval, false).unwrap().logdet;
                let brute = brute_logdet(&b, &x, Phase::Eval);
                assert!((ev - brute).abs() <= 1e-4 * brute.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = random_stack(Shape4::new(2, 2, 8, 8), 3, 12);
        let b = random_block(1, 3, 2, Some(VnAxis::Channel), 13);
        let g = random_stack(Shape4::new(2, 2, 8, 8), 3, 14);
        let objective = |b: &DualCouplingBlock<f64>, x: &PyramidStack<f64>| -> f64 {
            let out = b.forward(x, Phase::Train, false).unwrap().output;
            out.levels().iter().zip(g.levels()).map(|(a, c)| a.dot(c).unwrap()).sum()
        };
        let step = b.forward(&x, Phase::Train, true).unwrap();
        let mut grad = g.clone();
        let pg = b.backward(step.cache.as_ref().unwrap(), &mut grad).unwrap();
        let eps = 1e-6;
        let names = b.param_names();
        for (pi, name) in names.iter().enumerate() {
            let len = pg[pi].len();
            for idx in [0, len / 3, len - 1] {
                let mut a = b.clone();
                let mut m = b.clone();
                a.parameters_mut()[pi].data[idx] += eps;
                m.parameters_mut()[pi].data[idx] -= eps;
                let fd = (objective(&a, &x) - objective(&m, &x)) / (2.0 * eps);
                let an = pg[pi][idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{name}[{idx}] fd {fd} analytic {an}");
            }
        }
        for d in 0..3 {
            for idx in [0, 5, x.level(d).len() - 1] {
                let mut a = x.clone();
                let mut m = x.clone();
                a.level_mut(d).data_mut()[idx] += eps;
                m.level_mut(d).data_mut()[idx] -= eps;
                let fd = (objective(&b, &a) - objective(&b, &m)) / (2.0 * eps);
                let an = grad.level(d).data()[idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "level {d}[{idx}]");
            }
        }
    }
}
