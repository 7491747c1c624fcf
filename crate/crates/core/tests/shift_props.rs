use hiresfill_core::image::{composite, resize_nearest, Image, Mask};
use hiresfill_core::shift::{assemble_stack, extract_patch, make_shift, sample_patch, Slot, STACK_CHANNELS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent per-pixel loop: output (y, x) reads source (y - dy, x - dx).
fn shift_oracle(img: &Image, mask: &Mask, dx: isize, dy: isize) -> (Vec<f32>, Vec<u8>) {
    let (h, w) = img.dims();
    let c = img.channels();
    let mut data = vec![0.0; h * w * c];
    let mut valid = vec![0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (sy, sx) = (y - dy, x - dx);
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                let (sy, sx) = (sy as usize, sx as usize);
                let i = y as usize * w + x as usize;
                valid[i] = mask.data()[sy * w + sx];
                for ch in 0..c {
                    data[i * c + ch] = img.get(sy, sx, ch);
                }
            }
        }
    }
    (data, valid)
}

fn image_strategy() -> impl Strategy<Value = (Image, Mask)> {
    (1usize..=32, 1usize..=32, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        (
            proptest::collection::vec(0u8..=255, h * w * c),
            proptest::collection::vec(proptest::bool::weighted(0.7), h * w),
        )
            .prop_map(move |(px, m)| {
                let img = Image::new(h, w, c, px.iter().map(|&v| v as f32 / 255.0).collect()).unwrap();
                let mask = Mask::new(h, w, m.iter().map(|&b| b as u8).collect()).unwrap();
                (img, mask)
            })
    })
}

fn shift_case() -> impl Strategy<Value = (Image, Mask, isize, isize)> {
    image_strategy().prop_flat_map(|(img, mask)| {
        let (h, w) = img.dims();
        let (mw, mh) = (w as isize - 1, h as isize - 1);
        (Just(img), Just(mask), -mw..=mw, -mh..=mh)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn make_shift_matches_loop_oracle((img, mask, dx, dy) in shift_case()) {
        let (out, out_mask) = make_shift(&img, &mask, dx, dy).unwrap();
        let (data, valid) = shift_oracle(&img, &mask, dx, dy);
        prop_assert_eq!(out.data(), &data[..]);
        prop_assert_eq!(out_mask.data(), &valid[..]);
        prop_assert_eq!(out_mask.valid_count(), valid.iter().filter(|&&v| v == 1).count());
    }

    #[test]
    fn shifts_too_large_are_rejected((img, mask) in image_strategy()) {
        let (h, w) = img.dims();
        prop_assert!(make_shift(&img, &mask, w as isize, 0).is_err());
        prop_assert!(make_shift(&img, &mask, 0, -(h as isize)).is_err());
    }

    #[test]
    fn stacks_have_twenty_channels((img, mask) in image_strategy(), f in 0.05f64..0.5) {
        let s = assemble_stack(&img, &mask, f).unwrap();
        prop_assert_eq!(s.channel_count(), STACK_CHANNELS);
        prop_assert_eq!(s.images().len(), 5);
        prop_assert!(s.images().iter().all(|i| i.channels() == 3 && i.dims() == img.dims()));
        prop_assert_eq!(s.mask(Slot::Main), &mask);
    }

    #[test]
    fn composite_is_idempotent((base, mask) in image_strategy(), v in 0.0f32..=1.0) {
        let patch = Image::filled(base.height(), base.width(), base.channels(), v);
        let once = composite(&base, &patch, &mask).unwrap();
        prop_assert_eq!(&composite(&base, &once, &mask).unwrap(), &once);
        for (i, px) in once.data().chunks(base.channels()).enumerate() {
            let expect = if mask.data()[i] == 1 { base.pixel(i / base.width(), i % base.width()).to_vec() } else { vec![v; base.channels()] };
            prop_assert_eq!(px, &expect[..]);
        }
    }

    #[test]
    fn nearest_resize_only_copies_values((img, _) in image_strategy(), oh in 1usize..48, ow in 1usize..48) {
        let out = resize_nearest(&img, oh, ow).unwrap();
        prop_assert_eq!(out.dims(), (oh, ow));
        let c = img.channels();
        let source: Vec<&[f32]> = img.data().chunks(c).collect();
        for px in out.data().chunks(c) {
            prop_assert!(source.contains(&px));
        }
    }
}

#[test]
fn sampled_patches_satisfy_hole_bounds_by_recount() {
    let side = 96;
    let img = Image::from_fn(side, side, 3, |y, x, c| ((y * 13 + x * 7 + c) % 29) as f32 / 28.0);
    let masks = [
        Mask::from_fn(side, side, |y, x| !(20..70).contains(&y) || !(30..60).contains(&x)),
        Mask::from_fn(side, side, |y, x| (x / 9 + y / 11) % 3 != 0),
        Mask::from_fn(side, side, |y, _| y < 60),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut drawn = 0;
    for mask in &masks {
        let stack = assemble_stack(&img, mask, 0.2).unwrap();
        for size in [16, 32, 48] {
            for _ in 0..60 {
                let spec = sample_patch(&stack, size, &mut rng, 64).unwrap();
                let patch = extract_patch(&stack, &spec).unwrap();
                let holes = (spec.top..spec.top + size)
                    .flat_map(|y| (spec.left..spec.left + size).map(move |x| (y, x)))
                    .filter(|&(y, x)| !mask.is_valid(y, x))
                    .count();
                let area = size * size;
                assert!(holes * 10 >= area && holes * 10 <= 9 * area, "{holes}/{area}");
                assert_eq!(patch.mask(Slot::Main).hole_count(), holes);
                drawn += 1;
            }
        }
    }
    assert_eq!(drawn, 540);
}
