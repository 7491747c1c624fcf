use std::path::Path;

use hiresfill::evaluate::{evaluate_pairs, format_ranking, format_table, pair_files, parse_votes, rank_votes, write_csv, MetricRow, Region};
use hiresfill::io::{save_image, save_mask};
use hiresfill::Error;
use hiresfill_core::ranking::BradleyTerryConfig;
use hiresfill_core::{Image, Mask};

fn pattern(h: usize, w: usize, k: usize) -> Image {
    Image::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 3 + c * 40 + k * 17) % 200) as f32 / 255.0)
}

fn write_set(dir: &Path, imgs: &[(&str, Image)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, img) in imgs {
        save_image(img, &dir.join(format!("{name}.png"))).unwrap();
    }
}

#[test]
fn identical_sets_hit_the_metric_ceilings() {
    let root = tempfile::tempdir().unwrap();
    let imgs = [("a", pattern(48, 64, 0)), ("b", pattern(48, 64, 1))];
    write_set(&root.path().join("pred"), &imgs);
    write_set(&root.path().join("ref"), &imgs);
    let rows = evaluate_pairs("same", &root.path().join("pred"), &root.path().join("ref"), None, &[48, 24]).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.region, Region::Full);
        assert_eq!(r.images, 2);
        assert_eq!(r.psnr_db, 99.0);
        assert_eq!(r.l1_8bit, 0.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
    }
    assert_eq!(rows.iter().map(|r| r.resolution).collect::<Vec<_>>(), vec![48, 24]);
}

#[test]
fn metrics_match_a_direct_computation() {
    let root = tempfile::tempdir().unwrap();
    let reference = pattern(32, 32, 2);
    // A uniform offset of 10 levels: L1 = 10, PSNR = 20 log10(255 / 10).
    let pred = Image::from_fn(32, 32, 3, |y, x, c| reference.get(y, x, c) + 10.0 / 255.0);
    write_set(&root.path().join("pred"), &[("x", pred)]);
    write_set(&root.path().join("ref"), &[("x", reference)]);
    let mask = Mask::from_fn(32, 32, |y, _| y < 16);
    std::fs::create_dir_all(root.path().join("mask")).unwrap();
    save_mask(&mask, &root.path().join("mask/x.png")).unwrap();
    let rows = evaluate_pairs("shifted", &root.path().join("pred"), &root.path().join("ref"), Some(&root.path().join("mask")), &[32, 16]).unwrap();
    assert_eq!(rows.len(), 4);
    let expected_psnr = 20.0 * (255.0f64 / 10.0).log10();
    for r in &rows {
        assert!((r.l1_8bit - 10.0).abs() < 1e-3, "{r:?}");
        assert!((r.psnr_db - expected_psnr).abs() < 1e-3, "{r:?}");
    }
    assert_eq!(rows.iter().filter(|r| r.region == Region::Hole).count(), 2);
}

#[test]
fn aspect_ratio_is_kept_when_downsampling() {
    let root = tempfile::tempdir().unwrap();
    let reference = pattern(40, 80, 0);
    let pred = Image::from_fn(40, 80, 3, |y, x, c| if x < 40 { reference.get(y, x, c) } else { 0.0 });
    write_set(&root.path().join("pred"), &[("x", pred.clone())]);
    write_set(&root.path().join("ref"), &[("x", reference.clone())]);
    let rows = evaluate_pairs("half", &root.path().join("pred"), &root.path().join("ref"), None, &[20]).unwrap();
    let (p, r) = (hiresfill_core::resize_nearest(&pred, 20, 40).unwrap(), hiresfill_core::resize_nearest(&reference, 20, 40).unwrap());
    let want = hiresfill_core::metrics::mean_l1_8bit(&p, &r).unwrap();
    assert!((rows[0].l1_8bit - want).abs() < 1e-9);
}

#[test]
fn unmatched_names_are_a_pairing_error() {
    let root = tempfile::tempdir().unwrap();
    write_set(&root.path().join("pred"), &[("a", pattern(8, 8, 0)), ("b", pattern(8, 8, 0))]);
    write_set(&root.path().join("ref"), &[("a", pattern(8, 8, 0)), ("c", pattern(8, 8, 0))]);
    assert!(matches!(pair_files(&root.path().join("pred"), &root.path().join("ref")), Err(Error::Pairing(_))));
    write_set(&root.path().join("empty_pred"), &[]);
    write_set(&root.path().join("empty_ref"), &[]);
    assert!(matches!(pair_files(&root.path().join("empty_pred"), &root.path().join("empty_ref")), Err(Error::Pairing(_))));
}

#[test]
fn mismatched_sizes_are_a_pairing_error() {
    let root = tempfile::tempdir().unwrap();
    write_set(&root.path().join("pred"), &[("a", pattern(8, 8, 0))]);
    write_set(&root.path().join("ref"), &[("a", pattern(8, 10, 0))]);
    assert!(matches!(evaluate_pairs("m", &root.path().join("pred"), &root.path().join("ref"), None, &[8]), Err(Error::Pairing(_))));
}

#[test]
fn table_and_csv_carry_every_row() {
    let rows = vec![
        MetricRow { method: "ours".into(), region: Region::Full, resolution: 512, images: 3, l1_8bit: 1.5, psnr_db: 30.25, ssim: 0.9 },
        MetricRow { method: "ours".into(), region: Region::Full, resolution: 1024, images: 3, l1_8bit: 1.25, psnr_db: 31.0, ssim: 0.95 },
    ];
    let table = format_table(&rows);
    assert!(table.contains("512px") && table.contains("1024px") && table.contains("30.250"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rows.csv");
    write_csv(&rows, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().next().unwrap().starts_with("method,region,resolution"));
}

#[test]
fn three_of_four_votes_give_a_ln3_gap() {
    let votes = parse_votes("winner,loser\n# pilot\nA,B\nA,B\nA,B\nB,A\n").unwrap();
    assert_eq!(votes.methods, vec!["A", "B"]);
    let (scores, ranked) = rank_votes(&votes, &BradleyTerryConfig::default()).unwrap();
    assert_eq!(ranked[0].method, "A");
    assert!((ranked[0].score - ranked[1].score - 3f64.ln()).abs() < 1e-6);
    assert!((scores.win_probability(0, 1) - 0.75).abs() < 1e-6);
    assert!(format_ranking(&ranked).contains("1.0986"));
}

#[test]
fn weighted_and_unweighted_votes_agree() {
    let a = parse_votes("x,y,3\ny,x,1\ny,z,2\nz,y\nx,z\nz,x\n").unwrap();
    let b = parse_votes("x,y\nx,y\nx,y\ny,x\ny,z\ny,z\nz,y\nx,z\nz,x\n").unwrap();
    let cfg = BradleyTerryConfig::default();
    let (sa, _) = rank_votes(&a, &cfg).unwrap();
    let (sb, _) = rank_votes(&b, &cfg).unwrap();
    for (p, q) in sa.scores.iter().zip(&sb.scores) {
        assert!((p - q).abs() < 1e-9);
    }
}

#[test]
fn malformed_votes_are_rejected() {
    for bad in ["a,a\n", "a,b,c,d\n", "a,b,-1\n", "a,b,x\n", "a\n", "", "a,b\nc,d\n"] {
        let res = parse_votes(bad).and_then(|v| rank_votes(&v, &BradleyTerryConfig::default()).map(|_| ()));
        assert!(matches!(res, Err(Error::Votes(_))), "{bad:?}");
    }
}

#[test]
fn disconnected_comparison_graph_names_the_methods() {
    let votes = parse_votes("alpha,beta\nbeta,alpha\ngamma,delta\ndelta,gamma\n").unwrap();
    let err = rank_votes(&votes, &BradleyTerryConfig::default()).unwrap_err().to_string();
    assert!(err.contains("alpha") && err.contains("gamma"), "{err}");
}
