use hiresfill_core::coarse::{coarse_fill, pyramid_fill, CoarseConfig};
use hiresfill_core::features::{ExtractorConfig, FeatureExtractor};
use hiresfill_core::image::{Image, Mask};
use hiresfill_core::losses::{batch_loss, l1_loss, perceptual_loss, style_loss, tv_loss, LossConfig};
use hiresfill_core::metrics::{mean_l1_8bit, psnr, ssim};
use hiresfill_core::ranking::{bradley_terry, bradley_terry_from, BradleyTerryConfig, VoteMatrix};
use hiresfill_core::shift::{assemble_stack, make_shift, ShiftStack};
use hiresfill_core::{RefinerConfig, RefinerModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p_valid: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(p_valid))
}

#[test]
fn every_weight_tensor_receives_a_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let target = random_image(&mut rng, 64, 64);
    let mask = Mask::from_fn(64, 64, |y, x| !(16..44).contains(&y) || !(20..40).contains(&x));
    let corrupted = hiresfill_core::composite(&target, &Image::filled(64, 64, 3, 0.0), &mask).unwrap();
    let stack = assemble_stack(&corrupted, &mask, 0.2).unwrap();
    let model = RefinerModel::<f32>::init(RefinerConfig::default(), 3).unwrap();
    let fx = FeatureExtractor::<f32>::new(ExtractorConfig::default()).unwrap();
    let x = ShiftStack::to_tensor::<f32>(&[&stack]).unwrap();
    let cache = model.forward_train(&x).unwrap();
    let reference = hiresfill_core::Tensor::from_images(&[&target]).unwrap();
    let (_, grad) = batch_loss(&fx, cache.output(), &reference, &[&mask], &LossConfig::default(), true).unwrap();
    let grads = model.backward(&cache, &grad.unwrap());
    let names: Vec<String> = model.parameters().into_iter().map(|p| p.0).collect();
    assert_eq!(grads.tensors.len(), names.len());
    for (name, g) in names.iter().zip(&grads.tensors) {
        assert!(g.iter().all(|v| v.is_finite()), "{name} has a non-finite gradient");
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

fn strip_case() -> impl Strategy<Value = (u64, usize, usize, isize, isize)> {
    (any::<u64>(), 2usize..=24, 2usize..=24).prop_flat_map(|(seed, h, w)| {
        let m = w as isize - 1;
        (Just(seed), Just(h), Just(w), -m..=m, -m..=m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn horizontal_shifts_compose((seed, h, w, d1, d2) in strip_case()) {
        prop_assume!((d1 + d2).unsigned_abs() < w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, h, w);
        let mask = random_mask(&mut rng, h, w, 0.7);
        let (a, ma) = make_shift(&img, &mask, d1, 0).unwrap();
        let (b, mb) = make_shift(&a, &ma, d2, 0).unwrap();
        let (once, m_once) = make_shift(&img, &mask, d1 + d2, 0).unwrap();
        for y in 0..h {
            for x in 0..w {
                let mid = x as isize - d2;
                let src = mid - d1;
                let defined = (0..w as isize).contains(&mid) && (0..w as isize).contains(&src);
                if defined {
                    prop_assert_eq!(b.pixel(y, x), once.pixel(y, x));
                }
                // Composed validity is the pointwise minimum of the two passes.
                let first = (0..w as isize).contains(&mid) && ma.is_valid(y, mid as usize);
                prop_assert_eq!(mb.is_valid(y, x), first && m_once.is_valid(y, x));
            }
        }
    }

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
        let mask = random_mask(&mut rng, 8, 8, 0.5);
        let fx = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
        prop_assert!(l1_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(tv_loss(&a, &mask).unwrap() >= 0.0);
        prop_assert!(perceptual_loss(&fx, &a, &b).unwrap() >= 0.0);
        prop_assert!(style_loss(&fx, &a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(mean_l1_8bit(&a, &b).unwrap(), mean_l1_8bit(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pyramid_fill_never_alters_known_pixels(seed in any::<u64>(), h in 1usize..40, w in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, h, w);
        let mask = random_mask(&mut rng, h, w, 0.6);
        let out = pyramid_fill(&img, &mask).unwrap();
        for y in 0..h {
            for x in 0..w {
                if mask.is_valid(y, x) {
                    prop_assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
        prop_assert_eq!(pyramid_fill(&img, &Mask::all_valid(h, w)).unwrap(), img);
    }
}

#[test]
fn identical_images_give_zero_data_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(&mut rng, 16, 16);
    let fx = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(perceptual_loss(&fx, &a, &a).unwrap(), 0.0);
    assert_eq!(style_loss(&fx, &a, &a).unwrap(), 0.0);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = Image::from_fn(32, 32, 3, |y, x, c| 0.25 + 0.5 * ((y + x + c) % 7) as f32 / 7.0);
    let noise: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let noisy = |amp: f32| Image::new(32, 32, 3, base.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect()).unwrap();
    let scores: Vec<f64> = [0.01, 0.05, 0.2].iter().map(|&a| psnr(&noisy(a), &base).unwrap()).collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}

#[test]
fn coarse_output_keeps_input_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(64, 64), (64, 100), (130, 70), (97, 203)] {
        let img = random_image(&mut rng, h, w);
        let mask = Mask::from_fn(h, w, |y, x| (y / 9 + x / 13) % 3 != 0);
        let r = coarse_fill(&img, &mask, &CoarseConfig { working_size: 64, ..Default::default() }).unwrap();
        assert_eq!(r.filled_full.dims(), (h, w));
    }
}

fn votes_fixture() -> VoteMatrix {
    VoteMatrix::from_rows(&[vec![0.0, 7.0, 3.0, 5.0], vec![3.0, 0.0, 6.0, 2.0], vec![2.0, 4.0, 0.0, 1.0], vec![5.0, 8.0, 9.0, 0.0]]).unwrap()
}

#[test]
fn bradley_terry_ignores_the_scale_of_initial_worths() {
    let votes = votes_fixture();
    let cfg = BradleyTerryConfig::default();
    let base = bradley_terry(&votes, &cfg).unwrap();
    for k in [1e-3, 0.5, 7.0, 1e4] {
        let s = bradley_terry_from(&votes, &cfg, &[k; 4]).unwrap();
        assert_eq!(s.ranking(), base.ranking());
        for (a, b) in s.scores.iter().zip(&base.scores) {
            assert!((a - b).abs() < 1e-8, "k={k}");
        }
    }
    let skewed = bradley_terry_from(&votes, &cfg, &[0.2, 3.0, 1.0, 9.0]).unwrap();
    for (a, b) in skewed.scores.iter().zip(&base.scores) {
        assert!((a - b).abs() < 1e-7);
    }
    assert!(bradley_terry_from(&votes, &cfg, &[1.0, 0.0, 1.0, 1.0]).is_err());
}
