use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyramidflow::autodiff::TapeMode;
use pyramidflow::flow::{Phase, VnAxis};
use pyramidflow::model::{ModelConfig, PyramidFlowModel};
use pyramidflow::pyramid::{compose, decompose};
use pyramidflow::tensor::{Shape4, Tensor4};
use pyramidflow::train::{
    anomaly_map, bench_memory, fit_templates, fourier_loss, pair_loss, train_step, AdamConfig, LossKind,
    OptimizerState, StepOptions,
};
use pyramidflow::{ModelF32, ModelF64};

fn image(c: usize, side: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(Shape4::new(1, c, side, side), |_, _, _, _| rng.gen_range(0.0..1.0))
}

fn vn_strategy() -> impl Strategy<Value = Option<VnAxis>> {
    prop_oneof![Just(None), Just(Some(VnAxis::Channel)), Just(Some(VnAxis::Spatial))]
}

fn shaken(config: ModelConfig) -> ModelF64 {
    let mut m = ModelF64::build(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed + 1);
    m.for_each_parameter_mut(|name, data| {
        if name != "W" {
            data.iter_mut().for_each(|v| *v += rng.gen_range(-0.25..0.25));
        }
    });
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pyramid_composes_back(levels in 1usize..5, c in 1usize..4, hk in 1usize..5, wk in 1usize..5, seed in any::<u64>()) {
        let m = 1 << (levels - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor4::<f64>::from_fn(Shape4::new(1, c, hk * m, wk * m), |_, _, _, _| rng.gen_range(-5.0..5.0));
        let stack = decompose(&x, levels).unwrap();
        prop_assert_eq!(stack.num_levels(), levels);
        prop_assert!(compose(&stack).max_abs_diff(&x).unwrap() < 1e-11);
    }

    #[test]
    fn model_inverts_its_forward(levels in 1usize..4, depth in 1usize..3, extra in 0usize..3, vn in vn_strategy(), seed in 0u64..1000) {
        let config = ModelConfig { levels, depth, channels: 2 + extra, c_in: 2, vn, seed };
        let model = shaken(config);
        let img = image(2, 8, seed);
        for phase in [Phase::Train, Phase::Eval] {
            let z = model.forward(&img, phase).unwrap();
            let back = model.unlift(&model.inverse(&z, phase).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&img).unwrap() < 1e-9);
        }
    }

    #[test]
    fn volume_normalized_models_have_zero_train_logdet(levels in 1usize..4, depth in 1usize..3, spatial in any::<bool>(), seed in 0u64..1000) {
        let vn = Some(if spatial { VnAxis::Spatial } else { VnAxis::Channel });
        let model = shaken(ModelConfig { levels, depth, channels: 4, c_in: 1, vn, seed });
        let batch = Tensor4::stack_batch(&[&image(1, 8, seed), &image(1, 8, seed + 1)]).unwrap();
        let (_, logdet) = model.forward_with_logdet(&batch, Phase::Train).unwrap();
        prop_assert!(logdet.abs() < 1e-9);
    }

    #[test]
    fn pair_losses_are_symmetric_and_nonnegative(seed in 0u64..1000, levels in 1usize..4) {
        let za = decompose(&image(3, 8, seed), levels).unwrap();
        let zb = decompose(&image(3, 8, seed + 7), levels).unwrap();
        for kind in [LossKind::Fourier, LossKind::Spatial] {
            let ab = pair_loss(kind, &za, &zb).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - pair_loss(kind, &zb, &za).unwrap()).abs() < 1e-14);
        }
        prop_assert_eq!(fourier_loss(&za, &za).unwrap(), 0.0);
    }
}

#[test]
fn tapes_commit_running_means_but_forward_does_not() {
    let config = ModelConfig { levels: 2, depth: 1, channels: 2, c_in: 1, vn: Some(VnAxis::Channel), seed: 3 };
    let mut model = ModelF64::build(config).unwrap();
    let img = image(1, 8, 1);
    model.forward(&img, Phase::Train).unwrap();
    assert!(model.blocks.iter().all(|b| b.vn_state().is_none_or(|v| v.running_mean.is_none())));
    let stack = model.encode(&img).unwrap();
    model.tape(TapeMode::Reversible).forward(&stack, Phase::Train).unwrap();
    assert!(model.blocks.iter().filter_map(|b| b.vn_state()).all(|v| v.running_mean.is_some()));
}

#[test]
fn training_pulls_a_fixed_pair_together() {
    let config = ModelConfig { levels: 2, depth: 1, channels: 4, c_in: 1, vn: Some(VnAxis::Channel), seed: 5 };
    let mut model = ModelF64::build(config).unwrap();
    let mut opt = OptimizerState::new(AdamConfig { lr: 5e-3, ..AdamConfig::default() });
    let (a, b) = (image(1, 16, 10), image(1, 16, 11));
    let first = train_step(&mut model, (&a, &b), &mut opt, StepOptions::default()).unwrap().loss;
    let mut last = first;
    for _ in 0..30 {
        last = train_step(&mut model, (&a, &b), &mut opt, StepOptions::default()).unwrap().loss;
    }
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn template_of_one_image_scores_it_zero_and_flags_a_change() {
    let config = ModelConfig { levels: 3, depth: 2, channels: 4, c_in: 1, vn: Some(VnAxis::Spatial), seed: 9 };
    let model = shaken(config);
    let img = image(1, 16, 4);
    let template = fit_templates(&model, [&img]).unwrap();
    assert_eq!(template.sample_count, 1);
    assert!(anomaly_map(&model, &template, &img).unwrap().max_abs() < 1e-12);
    let mut defect = img.clone();
    for i in 6..10 {
        for j in 6..10 {
            defect.set(0, 0, i, j, 1.5);
        }
    }
    let map = anomaly_map(&model, &template, &defect).unwrap();
    assert_eq!(map.shape(), Shape4::new(1, 1, 16, 16));
    let peak = (0..256).max_by(|&a, &b| map.data()[a].total_cmp(&map.data()[b])).unwrap();
    let (i, j) = (peak / 16, peak % 16);
    assert!((4..12).contains(&i) && (4..12).contains(&j), "peak at ({i}, {j})");
}

#[test]
fn image_template_of_latent_means_is_a_finite_image() {
    let config = ModelConfig { levels: 2, depth: 2, channels: 3, c_in: 2, vn: None, seed: 2 };
    let model = shaken(config);
    let images: Vec<_> = (0..3).map(|k| image(2, 8, 20 + k)).collect();
    let template = fit_templates(&model, &images).unwrap();
    let recovered = model.image_template(&template.means).unwrap();
    assert_eq!(recovered.shape(), images[0].shape());
    assert!(recovered.all_finite());
}

#[test]
fn memory_accounting_flat_for_reversible() {
    let config = ModelConfig { levels: 3, depth: 1, channels: 2, c_in: 1, vn: Some(VnAxis::Channel), seed: 0 };
    let rev = bench_memory(config, 8, &[1, 2, 3], TapeMode::Reversible).unwrap();
    let std = bench_memory(config, 8, &[1, 2, 3], TapeMode::Standard).unwrap();
    assert!(rev.iter().all(|r| r.peak_buffers == rev[0].peak_buffers));
    assert!(std.windows(2).all(|w| w[1].peak_buffers > w[0].peak_buffers));
    assert!(std[2].bytes > rev[2].bytes);
}

#[test]
fn f32_and_f64_models_agree_from_the_same_seed() {
    let config = ModelConfig { levels: 2, depth: 2, channels: 3, c_in: 1, vn: Some(VnAxis::Channel), seed: 12 };
    let m64 = ModelF64::build(config).unwrap();
    let m32 = ModelF32::build(config).unwrap();
    let img = image(1, 8, 3);
    let z64 = m64.forward(&img, Phase::Eval).unwrap();
    let z32 = m32.forward(&img.cast::<f32>(), Phase::Eval).unwrap();
    assert!(z32.cast::<f64>().max_abs_diff(&z64).unwrap() < 1e-5);
    assert_eq!(PyramidFlowModel::<f64>::build(config).unwrap(), m64);
}
