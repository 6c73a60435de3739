//! Non-learnable pruning baseline: rank tokens by the class-token attention
//! they received, averaged over heads and layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Running sum of class-token attention over heads and layers, aligned to
/// the retained patch tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeuristicState {
    sums: Vec<f64>,
    contributions: usize,
}

impl HeuristicState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the `cls_out` row of every head's map for one layer.
    pub fn accumulate(&mut self, maps: &[Tensor]) -> Result<()> {
        for map in maps {
            let n = map.cols().saturating_sub(1);
            if n == 0 || !map.is_matrix() || map.rows() != map.cols() {
                return contract(format!("attention map of shape {:?}", map.shape()));
            }
            if self.contributions == 0 {
                self.sums = vec![0.0; n];
            } else if self.sums.len() != n {
                return contract(format!(
                    "heuristic tracks {} tokens but the map has {n}",
                    self.sums.len()
                ));
            }
            for (s, &a) in self.sums.iter_mut().zip(&map.row(0)[1..]) {
                *s += a;
            }
            self.contributions += 1;
        }
        Ok(())
    }

    /// Mean class-token attention per retained patch token.
    pub fn scores(&self) -> Result<Vec<f64>> {
        if self.contributions == 0 {
            return contract("heuristic scores need at least one layer of maps");
        }
        let c = self.contributions as f64;
        Ok(self.sums.iter().map(|s| s / c).collect())
    }

    /// Keeps the entries at `keep` (indices into the current maps, class token first).
    pub fn shrink(&mut self, keep: &[usize]) -> Result<()> {
        if keep.first() != Some(&0) {
            return contract("shrink must keep the class token at index 0");
        }
        if self.contributions > 0 {
            self.sums = keep[1..].iter().map(|&i| self.sums[i - 1]).collect();
        }
        Ok(())
    }
}

/// Scores for a stack of `maps[layer][head]` on a fixed token set.
pub fn heuristic_score(maps: &[Vec<Tensor>]) -> Result<Vec<f64>> {
    let mut state = HeuristicState::new();
    for layer in maps {
        state.accumulate(layer)?;
    }
    state.scores()
}

/// Sample variance, across `trials`, of the mean of `layers` noisy copies of
/// a fixed relevance value with independent N(0, σ²) noise.
pub fn variance_reduction_trial(sigma: f64, layers: usize, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    if layers < 1 || trials < 1000 {
        return contract("variance trial needs at least one layer and 1000 trials");
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| crate::error::Error::Contract(e.to_string()))?;
    let relevance = 0.3;
    let estimates: Vec<f64> = (0..trials)
        .map(|_| {
            let total: f64 = (0..layers).map(|_| relevance + noise.sample(rng)).sum();
            total / layers as f64
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / trials as f64;
    Ok(estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64)
}
