use hiresfill_core::features::{ExtractorConfig, FeatureExtractor};
use hiresfill_core::image::{Image, Mask};
use hiresfill_core::losses::{batch_loss, gram, l1_loss, perceptual_loss, style_loss, tv_loss, LossConfig, LossWeights};
use hiresfill_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Cyclic Jacobi rotations; returns the eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[test]
fn jacobi_oracle_sanity() {
    let mut ev = jacobi_eigenvalues(vec![2.0, 1.0, 1.0, 2.0], 2);
    ev.sort_by(f64::total_cmp);
    assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
}

#[test]
fn gram_is_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (c, n) in [(1, 4), (5, 3), (8, 40), (16, 9)] {
        let f: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = gram(&f, c, n);
        for i in 0..c {
            for j in 0..c {
                assert!((g[i * c + j] - g[j * c + i]).abs() < 1e-9);
                let direct: f64 = (0..n).map(|k| f[i * n + k] * f[j * n + k]).sum::<f64>() / (c * n) as f64;
                assert!((g[i * c + j] - direct).abs() < 1e-12);
            }
        }
        for ev in jacobi_eigenvalues(g, c) {
            assert!(ev >= -1e-9, "eigenvalue {ev}");
        }
    }
}

#[test]
fn l1_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 4, 4);
    let b = random_image(&mut rng, 4, 4);
    let mut s = 0.0;
    for i in 0..a.data().len() {
        s += (a.data()[i] as f64 - b.data()[i] as f64).abs();
    }
    assert!((l1_loss(&a, &b).unwrap() - s / 48.0).abs() < 1e-7);
}

#[test]
fn feature_losses_match_two_path_recomputation() {
    let fx = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_image(&mut rng, 32, 32);
    let b = random_image(&mut rng, 32, 32);
    let fa = fx.extract_image(&a).unwrap();
    let fb = fx.extract_image(&b).unwrap();
    let mut p = 0.0;
    let mut s = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (c, n) = (x.c(), x.plane());
        p += x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()).sum::<f64>() / (c * n) as f64;
        let (gx, gy) = (gram(x.data(), c, n), gram(y.data(), c, n));
        s += gx.iter().zip(&gy).map(|(u, v)| (u - v).abs()).sum::<f64>() / (c * c) as f64;
    }
    assert!((perceptual_loss(&fx, &a, &b).unwrap() - p).abs() < 1e-12);
    assert!((style_loss(&fx, &a, &b).unwrap() - s).abs() < 1e-12);
    assert!(perceptual_loss(&fx, &a, &b).unwrap() >= 0.0);
    assert_eq!(perceptual_loss(&fx, &a, &a).unwrap(), 0.0);
    assert_eq!(style_loss(&fx, &a, &a).unwrap(), 0.0);
}

#[test]
fn gram_ignores_spatial_permutation() {
    let fx = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 32, 32);
    for f in fx.extract_image(&img).unwrap() {
        let (c, n) = (f.c(), f.plane());
        // Reverse the positions of every channel with the same permutation.
        let permuted: Vec<f64> = (0..c).flat_map(|ch| (0..n).rev().map(move |k| (ch, k))).map(|(ch, k)| f.data()[ch * n + k]).collect();
        let perceptual: f64 = f.data().iter().zip(&permuted).map(|(a, b)| (a - b).abs()).sum::<f64>() / (c * n) as f64;
        let (g1, g2) = (gram(f.data(), c, n), gram(&permuted, c, n));
        let style: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b).abs()).sum::<f64>() / (c * c) as f64;
        assert!(style < 1e-12, "style {style}");
        if n > 1 {
            assert!(perceptual > 0.0);
        }
    }
}

#[test]
fn constant_image_features_are_constant_away_from_borders() {
    let fx = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    let feats = fx.extract_image(&Image::filled(128, 128, 3, 0.8)).unwrap();
    // Receptive-field margin of stage j under zero padding: 2^(j+1) - 1 pixels
    // at input scale, i.e. at most 2 output positions for these stages.
    for f in feats {
        let (h, w) = (f.h(), f.w());
        for c in 0..f.c() {
            let v = f.at(0, c, h / 2, w / 2);
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    assert!((f.at(0, c, y, x) - v).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn total_is_linear_in_weights() {
    let fx = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(&mut rng, 16, 16);
    let b = random_image(&mut rng, 16, 16);
    let mask = Mask::from_fn(16, 16, |y, x| y < 5 || x > 10);
    let w1 = LossWeights { w_tv: 0.3, w_l1: 2.0, w_p: 0.5, w_s: 10.0 };
    let w2 = LossWeights { w_tv: 1.0, w_l1: 0.0, w_p: 4.0, w_s: 1.0 };
    let sum = LossWeights { w_tv: 1.3, w_l1: 2.0, w_p: 4.5, w_s: 11.0 };
    let t = |w: &LossWeights| hiresfill_core::losses::total_loss(&fx, &a, &b, &mask, w).unwrap().total;
    assert!((t(&w1) + t(&w2) - t(&sum)).abs() < 1e-9 * t(&sum));
    assert!((tv_loss(&a, &mask).unwrap() - hiresfill_core::losses::total_loss(&fx, &a, &b, &mask, &LossWeights { w_tv: 1.0, w_l1: 0.0, w_p: 0.0, w_s: 0.0 }).unwrap().total).abs() < 1e-15);
}

/// Central finite differences (step 1e-4) against the analytic gradient of
/// each term isolated by one-hot weights, on random 3x8x8 inputs.
#[test]
fn loss_gradients_match_finite_differences() {
    let fx = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pred_img = random_image(&mut rng, 8, 8);
    let ref_img = random_image(&mut rng, 8, 8);
    let mask = Mask::from_fn(8, 8, |y, x| !(2..6).contains(&y) || !(1..5).contains(&x));
    let pred: Tensor<f64> = Tensor::from_images(&[&pred_img]).unwrap();
    let reference: Tensor<f64> = Tensor::from_images(&[&ref_img]).unwrap();
    let one_hot = [
        ("tv", LossWeights { w_tv: 1.0, w_l1: 0.0, w_p: 0.0, w_s: 0.0 }),
        ("l1", LossWeights { w_tv: 0.0, w_l1: 1.0, w_p: 0.0, w_s: 0.0 }),
        ("perceptual", LossWeights { w_tv: 0.0, w_l1: 0.0, w_p: 1.0, w_s: 0.0 }),
        ("style", LossWeights { w_tv: 0.0, w_l1: 0.0, w_p: 0.0, w_s: 1.0 }),
    ];
    for (name, weights) in one_hot {
        let cfg = LossConfig { weights, ..Default::default() };
        let value = |p: &Tensor<f64>| batch_loss(&fx, p, &reference, &[&mask], &cfg, false).unwrap().0.total;
        let grad = batch_loss(&fx, &pred, &reference, &[&mask], &cfg, true).unwrap().1.unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in 0..pred.data().len() {
            let mut p = pred.clone();
            p.data_mut()[i] += h;
            let mut m = pred.clone();
            m.data_mut()[i] -= h;
            let fd = (value(&p) - value(&m)) / (2.0 * h);
            let an = grad.data()[i];
            if an.abs().max(fd.abs()) <= 1e-6 {
                continue;
            }
            checked += 1;
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()));
        }
        assert!(checked > 0, "{name}: no elements checked");
        assert!(worst < 1e-3, "{name}: max relative error {worst}");
    }
}
