//! Siamese training, latent templates, anomaly scoring and metrics.

mod loss;
mod metrics;
mod optim;

pub use loss::{composed_difference, fourier_loss, loss_and_grad, pair_loss, LossKind};
pub use metrics::{aupro, connected_components, pixel_auroc, pro_curve, trapezoid_to};
pub use optim::{clip_global_norm, AdamConfig, OptimizerState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientSet, MemoryReport, TapeMode};
use crate::error::{shape_err, Error, Result};
use crate::flow::Phase;
use crate::model::{ModelConfig, PyramidFlowModel};
use crate::pyramid::{compose, compose_adjoint, decompose_adjoint, PyramidStack};
use crate::scalar::Scalar;
use crate::tensor::{channel_outer, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub loss: LossKind,
    pub mode: TapeMode,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            loss: LossKind::Fourier,
            mode: TapeMode::Reversible,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss and named gradients (`W` plus `depth{i}.level{d}.<param>`) for one
/// image pair. Running means are updated by the forward pass.
pub fn pair_gradients<T: Scalar>(
    model: &mut PyramidFlowModel<T>,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    options: StepOptions,
) -> Result<(T, GradientSet<T>)> {
    if a.shape() != b.shape() || a.shape().n != 1 {
        return shape_err(format!("pair needs two single images of equal shape, got {} and {}", a.shape(), b.shape()));
    }
    let images = Tensor4::stack_batch(&[a, b])?;
    let stack = model.encode(&images)?;
    let levels = model.config.levels;
    let saved: Vec<_> = model.blocks.iter().map(|b| b.vn_state().map(|v| v.running_mean.clone())).collect();
    let mut tape = model.tape(options.mode);
    let (z, _) = tape.forward(&stack, Phase::Train)?;
    let diff = composed_difference(&z.batch_item(0)?, &z.batch_item(1)?)?;
    let (loss, g_diff) = loss_and_grad(options.loss, &diff);
    if !loss.is_finite() {
        drop(tape);
        for (block, mean) in model.blocks.iter_mut().zip(saved) {
            if let (Some(vn), Some(mean)) = (block.vn_state_mut(), mean) {
                vn.running_mean = mean;
            }
        }
        return Err(Error::NonFinite(format!("training loss {}", loss.to_f64_lossy())));
    }
    let g_pos = compose_adjoint(&g_diff, levels)?;
    let g_neg = g_pos.map(|v| -v);
    let g_z = PyramidStack::stack_batch(&[&g_pos, &g_neg])?;
    let tg = tape.backward(&g_z)?;
    drop(tape);
    let g_x = decompose_adjoint(&tg.input)?;
    let g_w = channel_outer(&g_x, &images)?;
    let mut grads = GradientSet::new();
    grads.insert("W", g_w.data().to_vec());
    for (name, g) in model.rename_block_grads(tg.params).iter() {
        grads.insert(name, g.to_vec());
    }
    Ok((loss, grads))
}

/// Forward, loss, backward, global-norm clip and one optimizer update.
/// A non-finite loss aborts before any parameter or statistic changes.
pub fn train_step<T: Scalar>(
    model: &mut PyramidFlowModel<T>,
    pair: (&Tensor4<T>, &Tensor4<T>),
    opt: &mut OptimizerState<T>,
    options: StepOptions,
) -> Result<StepReport> {
    let (loss, mut grads) = pair_gradients(model, pair.0, pair.1, options)?;
    let grad_norm = clip_global_norm(&mut grads, opt.config.grad_clip);
    opt.apply(model, &grads)?;
    Ok(StepReport {
        loss: loss.to_f64_lossy(),
        grad_norm,
    })
}

/// Per-level latent means over defect-free images.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTemplate<T> {
    pub means: PyramidStack<T>,
    pub sample_count: usize,
}

impl<T: Scalar> LatentTemplate<T> {
    /// Fold one batch-1 latent pyramid into the streaming mean.
    pub fn update(this: &mut Option<Self>, z: &PyramidStack<T>) -> Result<()> {
        match this {
            None => {
                *this = Some(Self {
                    means: z.clone(),
                    sample_count: 1,
                })
            }
            Some(t) => {
                t.sample_count += 1;
                let k = T::c(1.0 / t.sample_count as f64);
                t.means = t.means.zip_map(z, |m, v| m + (v - m) * k)?;
            }
        }
        Ok(())
    }
}

/// Eval-mode latent means over `images` (each `1 × c_in × H × W`).
pub fn fit_templates<'a, T: Scalar + 'a>(
    model: &PyramidFlowModel<T>,
    images: impl IntoIterator<Item = &'a Tensor4<T>>,
) -> Result<LatentTemplate<T>> {
    let mut acc = None;
    for img in images {
        for n in 0..img.shape().n {
            let z = model.forward(&img.batch_item(n)?, Phase::Eval)?;
            LatentTemplate::update(&mut acc, &z)?;
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("template needs at least one image".into()))
}

/// Per-pixel channel norm of `z − template` at every level, composed to full
/// resolution: one `n × 1 × H × W` map.
pub fn anomaly_map_from_latents<T: Scalar>(z: &PyramidStack<T>, template: &LatentTemplate<T>) -> Result<Tensor4<T>> {
    let means = &template.means;
    if z.num_levels() != means.num_levels() {
        return shape_err(format!("{} latent levels vs {} template levels", z.num_levels(), means.num_levels()));
    }
    let mut levels = Vec::with_capacity(z.num_levels());
    for (zd, md) in z.levels().iter().zip(means.levels()) {
        let (s, m) = (zd.shape(), md.shape());
        if m.n != 1 || m.c != s.c || m.h != s.h || m.w != s.w {
            return shape_err(format!("latent {s} does not match template {m}"));
        }
        let mut sigma = Tensor4::<T>::zeros(Shape4::new(s.n, 1, s.h, s.w));
        for n in 0..s.n {
            for c in 0..s.c {
                let (zp, mp) = (zd.plane(n, c), md.plane(0, c));
                for (acc, (&a, &b)) in sigma.plane_mut(n, 0).iter_mut().zip(zp.iter().zip(mp)) {
                    let d = a - b;
                    *acc += d * d;
                }
            }
        }
        sigma.map_inplace(|v| v.sqrt());
        levels.push(sigma);
    }
    let map = compose(&PyramidStack::new(levels)?);
    // the blur of a non-negative plane is non-negative; clear rounding dust
    Ok(map.map(|v| if v < T::zero() { T::zero() } else { v }))
}

pub fn anomaly_map<T: Scalar>(model: &PyramidFlowModel<T>, template: &LatentTemplate<T>, image: &Tensor4<T>) -> Result<Tensor4<T>> {
    anomaly_map_from_latents(&model.forward(image, Phase::Eval)?, template)
}

/// Peak activation accounting for one training-shaped forward/backward per depth.
pub fn bench_memory(config: ModelConfig, size: usize, depths: &[usize], mode: TapeMode) -> Result<Vec<MemoryReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let images = Tensor4::<f32>::from_fn(Shape4::new(2, config.c_in, size, size), |_, _, _, _| rng.gen_range(0.0..1.0));
    depths
        .iter()
        .map(|&depth| {
            let mut model = PyramidFlowModel::<f32>::build(ModelConfig { depth, ..config })?;
            let stack = model.encode(&images)?;
            let mut tape = model.tape(mode);
            let (z, _) = tape.forward(&stack, Phase::Train)?;
            tape.backward(&z)?;
            Ok(tape.peak_memory_report())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{InvConv1x1, VnAxis};
    use crate::pyramid::decompose;

    fn image(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    fn cfg(vn: Option<VnAxis>) -> ModelConfig {
        ModelConfig { levels: 3, depth: 1, channels: 4, c_in: 2, vn, seed: 5 }
    }

    fn perturbed(vn: Option<VnAxis>) -> PyramidFlowModel<f64> {
        let mut m = PyramidFlowModel::build(cfg(vn)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        m.for_each_parameter_mut(|_, d| d.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1)));
        m
    }

    #[test]
    fn identical_pair_has_zero_loss_and_gradients() {
        let mut m = perturbed(Some(VnAxis::Channel));
        let a = image(Shape4::new(1, 2, 16, 16), 1);
        let (loss, grads) = pair_gradients(&mut m, &a, &a, StepOptions::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));
    }

    fn total_loss(m: &PyramidFlowModel<f64>, a: &Tensor4<f64>, b: &Tensor4<f64>, kind: LossKind) -> f64 {
        let za = m.forward(a, Phase::Train).unwrap();
        let zb = m.forward(b, Phase::Train).unwrap();
        pair_loss(kind, &za, &zb).unwrap()
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        for (kind, vn) in [(LossKind::Fourier, Some(VnAxis::Spatial)), (LossKind::Spatial, None)] {
            let m = perturbed(vn);
            let a = image(Shape4::new(1, 2, 8, 8), 2);
            let b = image(Shape4::new(1, 2, 8, 8), 3);
            let (_, grads) = pair_gradients(&mut m.clone(), &a, &b, StepOptions { loss: kind, mode: TapeMode::Reversible }).unwrap();
            let eps = 1e-6;
            for p in m.parameters() {
                let g = grads.get(&p.name).unwrap();
                for idx in [0, p.data.len() / 2, p.data.len() - 1] {
                    let shifted = |delta: f64| {
                        let mut c = m.clone();
                        c.for_each_parameter_mut(|n, d| {
                            if n == p.name {
                                d[idx] += delta;
                            }
                        });
                        total_loss(&c, &a, &b, kind)
                    };
                    let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                    assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} {}[{idx}]: fd {fd} vs {}", p.name, g[idx]);
                }
            }
        }
    }

    #[test]
    fn clipped_step_has_unit_norm_for_scaled_loss() {
        let mut m = perturbed(Some(VnAxis::Channel));
        let a = image(Shape4::new(1, 2, 8, 8), 4).scale(1e6);
        let b = image(Shape4::new(1, 2, 8, 8), 5).scale(1e6);
        let (_, mut grads) = pair_gradients(&mut m, &a, &b, StepOptions::default()).unwrap();
        let before = clip_global_norm(&mut grads, 1.0);
        assert!(before > 1.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts_without_changes() {
        let mut m = perturbed(Some(VnAxis::Channel));
        let before = m.clone();
        let mut a = image(Shape4::new(1, 2, 8, 8), 6);
        a.data_mut()[0] = f64::INFINITY;
        let b = image(Shape4::new(1, 2, 8, 8), 7);
        let mut opt = OptimizerState::new(AdamConfig::default());
        assert!(train_step(&mut m, (&a, &b), &mut opt, StepOptions::default()).is_err());
        assert_eq!(m, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn templates_are_means() {
        let m = perturbed(Some(VnAxis::Channel));
        let imgs: Vec<_> = (0..100).map(|k| image(Shape4::new(1, 2, 8, 8), 10 + k)).collect();
        let one = fit_templates(&m, &imgs[..1]).unwrap();
        assert_eq!(one.means, m.forward(&imgs[0], Phase::Eval).unwrap());
        let two = fit_templates(&m, &imgs[..2]).unwrap();
        let z0 = m.forward(&imgs[0], Phase::Eval).unwrap();
        let z1 = m.forward(&imgs[1], Phase::Eval).unwrap();
        assert!(two.means.max_abs_diff(&z0.zip_map(&z1, |a, b| (a + b) / 2.0).unwrap()).unwrap() < 1e-15);
        let all = fit_templates(&m, &imgs).unwrap();
        let mut sum = PyramidStack::zeros(Shape4::new(1, 4, 8, 8), 3).unwrap();
        for img in &imgs {
            sum.add_assign(&m.forward(img, Phase::Eval).unwrap()).unwrap();
        }
        let two_pass = sum.map(|v| v / 100.0);
        assert!(all.means.max_abs_diff(&two_pass).unwrap() < 1e-10);
        assert_eq!(all.sample_count, 100);
        assert!(fit_templates::<f64>(&m, &[]).is_err());
    }

    #[test]
    fn anomaly_map_properties() {
        let mut m = PyramidFlowModel::<f64>::build(cfg(Some(VnAxis::Channel))).unwrap();
        for b in &mut m.blocks {
            b.invconv = InvConv1x1::identity(4, true);
        }
        let img = image(Shape4::new(1, 2, 16, 16), 20);
        let t = fit_templates(&m, [&img]).unwrap();
        assert_eq!(anomaly_map(&m, &t, &img).unwrap().max_abs(), 0.0);

        // single-pixel deviation at the finest level stays local
        let mut z = t.means.clone();
        let v = z.level(0).get(0, 1, 8, 8);
        z.level_mut(0).set(0, 1, 8, 8, v + 1.0);
        let map = anomaly_map_from_latents(&z, &t).unwrap();
        assert_eq!(map.get(0, 0, 8, 8), 1.0);
        for i in 0..16 {
            for j in 0..16 {
                if i != 8 || j != 8 {
                    assert_eq!(map.get(0, 0, i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn anomaly_map_matches_direct_formula() {
        let m = perturbed(Some(VnAxis::Spatial));
        let imgs: Vec<_> = (0..3).map(|k| image(Shape4::new(1, 2, 16, 16), 30 + k)).collect();
        let t = fit_templates(&m, &imgs).unwrap();
        let probe = image(Shape4::new(1, 2, 16, 16), 40);
        let z = m.forward(&probe, Phase::Eval).unwrap();
        let mut levels = Vec::new();
        for d in 0..3 {
            let s = z.level(d).shape();
            levels.push(Tensor4::from_fn(Shape4::new(1, 1, s.h, s.w), |_, _, i, j| {
                (0..s.c).map(|c| (z.level(d).get(0, c, i, j) - t.means.level(d).get(0, c, i, j)).powi(2)).sum::<f64>().sqrt()
            }));
        }
        let direct = compose(&PyramidStack::new(levels).unwrap());
        let map = anomaly_map(&m, &t, &probe).unwrap();
        assert!(map.max_abs_diff(&direct).unwrap() < 1e-8);
        assert!(map.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        // batch order does not matter
        let other = image(Shape4::new(1, 2, 16, 16), 41);
        let ab = anomaly_map(&m, &t, &Tensor4::stack_batch(&[&probe, &other]).unwrap()).unwrap();
        assert!(ab.batch_item(0).unwrap().max_abs_diff(&map).unwrap() < 1e-12);
    }

    #[test]
    fn bench_is_flat_for_reversible() {
        let c = ModelConfig { levels: 3, depth: 1, channels: 4, c_in: 1, vn: Some(VnAxis::Channel), seed: 1 };
        let rev = bench_memory(c, 16, &[1, 2, 3], TapeMode::Reversible).unwrap();
        assert!(rev.iter().all(|r| r.peak_buffers == rev[0].peak_buffers && r.bytes == rev[0].bytes));
        let std = bench_memory(c, 16, &[1, 2, 3], TapeMode::Standard).unwrap();
        assert_eq!(std.iter().map(|r| r.peak_buffers).collect::<Vec<_>>(), vec![4, 7, 10]);
        let _ = decompose::<f64>;
    }
}
