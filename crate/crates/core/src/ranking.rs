//! Bradley–Terry scores from pairwise preference votes.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// `wins[a][b]` counts how often method `a` was preferred over `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteMatrix {
    n: usize,
    wins: Vec<f64>,
}

impl VoteMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, wins: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::new(n);
        for (a, row) in rows.iter().enumerate() {
            ensure!(row.len() == n, "vote row {a} has {} entries, expected {n}", row.len());
            for (b, &c) in row.iter().enumerate() {
                if c != 0.0 {
                    m.add(a, b, c)?;
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn wins(&self, a: usize, b: usize) -> f64 {
        self.wins[a * self.n + b]
    }

    pub fn add(&mut self, winner: usize, loser: usize, count: f64) -> Result<()> {
        ensure!(winner < self.n && loser < self.n, "method index out of range");
        ensure!(winner != loser, "a method cannot beat itself");
        ensure!(count >= 0.0 && count.is_finite(), "vote counts must be finite and non-negative");
        self.wins[winner * self.n + loser] += count;
        Ok(())
    }

    fn games(&self, a: usize, b: usize) -> f64 {
        self.wins(a, b) + self.wins(b, a)
    }

    /// Connected components of the comparison graph (edges where any vote exists).
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(a) = queue.pop_front() {
                for b in 0..self.n {
                    if !seen[b] && self.games(a, b) > 0.0 {
                        seen[b] = true;
                        comp.push(b);
                        queue.push_back(b);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Methods reachable from `s` along "beat" edges.
    fn beaten_closure(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(a) = stack.pop() {
            for b in 0..self.n {
                if !seen[b] && self.wins(a, b) > 0.0 {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        seen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BradleyTerryConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Pseudo-count added to every compared pair in both directions; 0 disables.
    pub smoothing: f64,
}

impl Default for BradleyTerryConfig {
    fn default() -> Self {
        Self { max_iter: 10_000, tol: 1e-10, smoothing: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    /// Worths normalized to geometric mean 1.
    pub worths: Vec<f64>,
    /// `ln w_i - min_j ln w_j`.
    pub scores: Vec<f64>,
    pub iterations: usize,
}

impl ScoreVector {
    /// Estimated probability that `a` is preferred over `b`.
    pub fn win_probability(&self, a: usize, b: usize) -> f64 {
        self.worths[a] / (self.worths[a] + self.worths[b])
    }

    /// Method indices from best to worst.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

fn describe(comps: &[Vec<usize>]) -> String {
    let parts: Vec<String> = comps.iter().map(|c| format!("{c:?}")).collect();
    parts.join(" ")
}

/// Maximum-likelihood worths by minorization-maximization.
pub fn bradley_terry(votes: &VoteMatrix, cfg: &BradleyTerryConfig) -> Result<ScoreVector> {
    bradley_terry_from(votes, cfg, &vec![1.0; votes.len()])
}

/// [`bradley_terry`] started from the given positive worths.
pub fn bradley_terry_from(votes: &VoteMatrix, cfg: &BradleyTerryConfig, initial: &[f64]) -> Result<ScoreVector> {
    let n = votes.len();
    ensure!(n >= 1, "no methods to rank");
    ensure!(initial.len() == n, "{} initial worths for {n} methods", initial.len());
    ensure!(initial.iter().all(|w| w.is_finite() && *w > 0.0), "initial worths must be positive and finite");
    ensure!(cfg.smoothing >= 0.0 && cfg.tol > 0.0, "invalid Bradley–Terry settings");
    let comps = votes.components();
    if comps.len() > 1 {
        return Err(Error::Ranking(format!("comparison graph is disconnected; components: {}", describe(&comps))));
    }
    let mut v = votes.clone();
    if cfg.smoothing > 0.0 {
        for a in 0..n {
            for b in 0..n {
                if a != b && votes.games(a, b) > 0.0 {
                    v.wins[a * n + b] += cfg.smoothing;
                }
            }
        }
    } else {
        // A finite maximum exists only if every method can reach every
        // other through "beat" edges.
        for s in 0..n {
            let reach = v.beaten_closure(s);
            if let Some(t) = reach.iter().position(|r| !r) {
                let why = if (0..n).all(|b| v.wins(s, b) == 0.0) {
                    format!("method {s} has no wins")
                } else {
                    format!("method {s} never beats method {t}, directly or transitively")
                };
                return Err(Error::Ranking(format!(
                    "maximum-likelihood worths do not exist: {why}; enable smoothing to rank anyway"
                )));
            }
        }
    }

    let total_wins: Vec<f64> = (0..n).map(|a| (0..n).map(|b| v.wins(a, b)).sum()).collect();
    let mut w = initial.to_vec();
    let mut iterations = 0;
    for it in 1..=cfg.max_iter.max(1) {
        iterations = it;
        let mut next: Vec<f64> = (0..n)
            .map(|i| {
                let denom: f64 = (0..n).filter(|&j| j != i).map(|j| v.games(i, j) / (w[i] + w[j])).sum();
                if denom > 0.0 {
                    total_wins[i] / denom
                } else {
                    w[i]
                }
            })
            .collect();
        let log_mean = next.iter().map(|x| Float::ln(*x)).sum::<f64>() / n as f64;
        let scale = Float::exp(-log_mean);
        next.iter_mut().for_each(|x| *x *= scale);
        let change = next.iter().zip(&w).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
        w = next;
        if change < cfg.tol {
            break;
        }
    }
    let logs: Vec<f64> = w.iter().map(|x| Float::ln(*x)).collect();
    let min = logs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ScoreVector { worths: w, scores: logs.iter().map(|l| l - min).collect(), iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_methods_three_of_four() {
        let mut v = VoteMatrix::new(2);
        v.add(0, 1, 3.0).unwrap();
        v.add(1, 0, 1.0).unwrap();
        let s = bradley_terry(&v, &BradleyTerryConfig::default()).unwrap();
        assert!((s.win_probability(0, 1) - 0.75).abs() < 1e-9);
        assert!((s.scores[0] - 3f64.ln()).abs() < 1e-9);
        assert_eq!(s.scores[1], 0.0);
    }

    #[test]
    fn symmetric_votes_tie() {
        let v = VoteMatrix::from_rows(&[vec![0.0, 4.0, 2.0], vec![4.0, 0.0, 7.0], vec![2.0, 7.0, 0.0]]).unwrap();
        let s = bradley_terry(&v, &BradleyTerryConfig::default()).unwrap();
        assert!(s.scores.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn disconnected_graph_is_an_error() {
        let mut v = VoteMatrix::new(4);
        v.add(0, 1, 2.0).unwrap();
        v.add(1, 0, 1.0).unwrap();
        v.add(2, 3, 1.0).unwrap();
        v.add(3, 2, 1.0).unwrap();
        let err = bradley_terry(&v, &BradleyTerryConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Ranking(m) if m.contains("[0, 1]") && m.contains("[2, 3]")), "{err}");
    }

    #[test]
    fn winless_method_needs_smoothing() {
        let mut v = VoteMatrix::new(2);
        v.add(0, 1, 5.0).unwrap();
        assert!(matches!(bradley_terry(&v, &BradleyTerryConfig::default()), Err(Error::Ranking(_))));
        let s = bradley_terry(&v, &BradleyTerryConfig { smoothing: 0.5, ..Default::default() }).unwrap();
        assert!((s.win_probability(0, 1) - 5.5 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn count_scaling_leaves_scores_unchanged() {
        let rows = [vec![0.0, 3.0, 5.0], vec![2.0, 0.0, 4.0], vec![1.0, 6.0, 0.0]];
        let a = bradley_terry(&VoteMatrix::from_rows(&rows).unwrap(), &BradleyTerryConfig::default()).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * 7.0).collect()).collect();
        let b = bradley_terry(&VoteMatrix::from_rows(&scaled).unwrap(), &BradleyTerryConfig::default()).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn self_votes_rejected() {
        assert!(VoteMatrix::new(2).add(1, 1, 1.0).is_err());
    }
}
