use hiresfill_core::ranking::{bradley_terry, BradleyTerryConfig, VoteMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_votes(worths: &[f64], per_edge: usize, seed: u64) -> VoteMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = worths.len();
    let mut v = VoteMatrix::new(n);
    for a in 0..n {
        for b in a + 1..n {
            let p = worths[a] / (worths[a] + worths[b]);
            let wins = (0..per_edge).filter(|_| rng.gen_bool(p)).count() as f64;
            v.add(a, b, wins).unwrap();
            v.add(b, a, per_edge as f64 - wins).unwrap();
        }
    }
    v
}

#[test]
fn recovers_ordering_and_probabilities() {
    let truth = [4.0, 0.5, 2.0, 1.0, 8.0];
    let s = bradley_terry(&sample_votes(&truth, 1000, 42), &BradleyTerryConfig::default()).unwrap();
    assert_eq!(s.ranking(), vec![4, 0, 2, 3, 1]);
    for a in 0..5 {
        for b in 0..5 {
            if a != b {
                let p = truth[a] / (truth[a] + truth[b]);
                assert!((s.win_probability(a, b) - p).abs() < 0.05);
            }
        }
    }
    assert_eq!(s.scores.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
}

#[test]
fn fixed_point_satisfies_likelihood_equations() {
    let v = sample_votes(&[1.0, 3.0, 0.7, 2.2], 50, 9);
    let s = bradley_terry(&v, &BradleyTerryConfig::default()).unwrap();
    // At the maximum, observed wins equal expected wins for every method.
    for i in 0..4 {
        let observed: f64 = (0..4).map(|j| v.wins(i, j)).sum();
        let expected: f64 = (0..4).filter(|&j| j != i).map(|j| (v.wins(i, j) + v.wins(j, i)) * s.win_probability(i, j)).sum();
        assert!((observed - expected).abs() < 1e-6, "method {i}: {observed} vs {expected}");
    }
}
