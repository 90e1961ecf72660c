use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sct_core::gradcheck::{check_model, GradCheckOptions};
use sct_core::loss::{BackboneConfig, FrozenBackbone};
use sct_core::{Ablation, ImageTensor, SctConfig, SctModel, Tensor};

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, |_, _, _| rng.random::<f64>())
}

fn small_config(stages: usize, stem: usize, window: usize, variant: Ablation) -> SctConfig {
    let base = SctConfig {
        stages,
        stem_channels: stem,
        window_size: window,
        iterations: 3,
        estimation_size: window << stages << 1,
        num_heads: 1,
        ..SctConfig::default()
    };
    variant.apply(&base)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_shape_and_range(
        stages in 1usize..3,
        stem in prop::sample::select(vec![4usize, 16]),
        window in 1usize..3,
        variant in prop::sample::select(Ablation::ALL.to_vec()),
        h_extra in 0usize..40,
        w_extra in 0usize..40,
        seed in any::<u64>(),
    ) {
        let cfg = small_config(stages, stem, window, variant);
        // the channel-token feed-forward needs a square channel count
        prop_assume!(cfg.validate().is_ok());
        let model = SctModel::build(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = ((1 << stages) + h_extra, (1 << stages) + w_extra);
        let x = random_image(&mut rng, h, w);
        let maps = model.estimate_curves(&x).unwrap();
        prop_assert_eq!(maps.illumination().shape(), &[3, h, w]);
        prop_assert_eq!(maps.noise().shape(), &[3, h, w]);
        let y = model.enhance(&x).unwrap();
        prop_assert_eq!(y.tensor().shape(), &[3, h, w]);
        for v in y.tensor().data() {
            prop_assert!(v.is_finite() && (0.0..=1.0).contains(v));
        }
    }
}

#[test]
fn positive_illumination_without_noise_never_darkens() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = SctModel::build(SctConfig::tiny(), 3).unwrap();
    let wid = model.store().id("head.weight").unwrap();
    model.store_mut().get_mut(wid).data_mut().fill(0.0);
    for _ in 0..100 {
        let bias = Tensor::from_fn(&[6], |c| if c < 3 { rng.random_range(0.05..3.0) } else { 0.0 });
        model.store_mut().set("head.bias", bias).unwrap();
        let h = rng.random_range(4..40);
        let w = rng.random_range(4..40);
        let x = random_image(&mut rng, h, w);
        let y = model.enhance(&x).unwrap();
        assert!(y.mean() >= x.mean());
        for (a, b) in y.tensor().data().iter().zip(x.tensor().data()) {
            assert!(a >= b);
        }
    }
}

#[test]
fn removing_attention_shrinks_the_model() {
    let count = |a: Ablation| {
        SctModel::build(a.apply(&SctConfig::default()), 0)
            .unwrap()
            .num_parameters()
    };
    let full = count(Ablation::Full);
    assert!(count(Ablation::NoSpatialAttention) < full);
    assert!(count(Ablation::NoChannelAttention) < full);
    assert!(count(Ablation::MlpFfn) != full);
    assert!(count(Ablation::NoDenoise) < full);
    assert_eq!(count(Ablation::None), 0);
}

#[test]
fn gradients_hold_at_smallest_estimation_size() {
    let cfg = SctConfig {
        estimation_size: 16,
        ..SctConfig::tiny()
    };
    let model = SctModel::build(cfg, 5).unwrap();
    let backbone = FrozenBackbone::new(BackboneConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let low = ImageTensor::from_fn(16, 16, |_, _, _| 0.05 + 0.2 * rng.random::<f64>());
    let normal = random_image(&mut rng, 16, 16);
    let report = check_model(&model, &backbone, &low, &normal, &GradCheckOptions::default()).unwrap();
    let worst = report.worst().unwrap();
    assert!(worst.rel_error < 1e-4, "{worst:?}");
}

#[test]
fn inference_is_thread_safe_and_deterministic() {
    let model = SctModel::build(SctConfig::tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_image(&mut rng, 24, 40);
    let reference = model.enhance(&x).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| model.enhance(&x).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    });
}
