use hiresfill_core::maskgen::{generate_irregular_mask, MaskGenConfig};
use hiresfill_core::refiner::{inpaint, pad_to_grid, InpaintOptions};
use hiresfill_core::{Image, Mask, RefinerConfig, RefinerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> RefinerModel<f32> {
    let cfg = RefinerConfig { encoder_channels: vec![8, 12, 16], encoder_kernel_sizes: vec![5, 3, 3], ..Default::default() };
    RefinerModel::init(cfg, 17).unwrap()
}

#[test]
fn known_pixels_survive_the_pipeline() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..8 {
        let (h, w) = (rng.gen_range(64..100), rng.gen_range(64..100));
        let c = if case % 3 == 0 { 1 } else { 3 };
        let img = Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0));
        let mask = generate_irregular_mask(h, w, &MaskGenConfig::for_side(h, case)).unwrap();
        let out = inpaint(&model, &img, &mask, &InpaintOptions::default()).unwrap();
        assert_eq!((out.dims(), out.channels()), (img.dims(), img.channels()));
        for y in 0..h {
            for x in 0..w {
                if mask.is_valid(y, x) {
                    assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
    }
}

#[test]
fn all_valid_mask_is_identity() {
    let img = Image::from_fn(40, 50, 3, |y, x, c| ((y + x * c) % 7) as f32 / 6.0);
    let out = inpaint(&small_model(), &img, &Mask::all_valid(40, 50), &InpaintOptions::default()).unwrap();
    assert_eq!(out, img);
}

#[test]
fn mismatched_mask_is_rejected() {
    let img = Image::filled(40, 50, 3, 0.5);
    assert!(inpaint(&small_model(), &img, &Mask::all_valid(40, 51), &InpaintOptions::default()).is_err());
}

#[test]
fn padding_round_trips_for_odd_sizes() {
    let img = Image::from_fn(37, 53, 3, |y, x, c| ((y * 3 + x + c) % 11) as f32 / 10.0);
    let mask = Mask::from_fn(37, 53, |y, x| (y + x) % 5 != 0);
    let stack = hiresfill_core::assemble_stack(&img, &mask, 0.2).unwrap();
    let (padded, crop) = pad_to_grid(&stack, 5).unwrap();
    assert_eq!(padded.dims(), (48, 64));
    assert_eq!((crop.height, crop.width), (37, 53));
    assert_eq!(padded.images()[0].crop(0, 0, 37, 53).unwrap(), stack.images()[0]);
}

#[test]
fn generated_masks_have_moderate_coverage() {
    let mut total = 0.0;
    let n = 1000;
    for seed in 0..n {
        let m = generate_irregular_mask(512, 512, &MaskGenConfig::default().with_seed(seed)).unwrap();
        total += m.hole_fraction();
    }
    let mean = total / n as f64;
    assert!((0.05..=0.50).contains(&mean), "mean hole fraction {mean}");
}
