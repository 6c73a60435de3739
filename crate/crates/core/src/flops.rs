//! Analytical compute model. One multiply-accumulate counts as one unit;
//! softmax, normalization and activations are not counted.

use std::fmt::Write as _;

use crate::engine::target_counts;
use crate::error::{contract, Result};
use crate::predictor::{mlp_widths, PredictorConfig};
use crate::vit::ViTConfig;

/// QKV and output projections plus the two token-by-token products.
pub fn attention_cost(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

pub fn mlp_cost(n: u64, d: u64, hidden: u64) -> u64 {
    2 * n * d * hidden
}

/// One predictor on `n` patch tokens: remap projection plus the scoring MLP.
pub fn predictor_cost(n: u64, e: u64, d_remap: u64, d: u64) -> u64 {
    let (h1, h2) = mlp_widths(e as usize);
    let (h1, h2) = (h1 as u64, h2 as u64);
    n * (d * d_remap + e * h1 + h1 * h2 + h2 * 2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: usize,
    /// Tokens processed, class token included.
    pub tokens: u64,
    pub attention: u64,
    pub mlp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub layers: Vec<LayerCost>,
    pub embed: u64,
    pub head: u64,
    pub predictor: Vec<u64>,
    pub total: u64,
}

/// Token counts per layer and predictor placement for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionPlan {
    /// Patch tokens entering each layer (length = depth).
    pub patches_per_layer: Vec<u64>,
    /// `(patch tokens scored, feature width E, d_remap)` per predictor.
    pub predictors: Vec<(u64, u64, u64)>,
}

impl RetentionPlan {
    pub fn dense(cfg: &ViTConfig) -> Self {
        Self {
            patches_per_layer: vec![cfg.num_patches() as u64; cfg.depth],
            predictors: Vec::new(),
        }
    }

    /// Pruning before each stage layer to `⌈ρ^k·N_0⌉` patch tokens.
    pub fn sparse(
        cfg: &ViTConfig,
        rho: f64,
        stage_layers: &[usize],
        predictor: Option<&PredictorConfig>,
    ) -> Result<Self> {
        if stage_layers.iter().any(|&l| l == 0 || l > cfg.depth) || stage_layers.windows(2).any(|w| w[0] >= w[1]) {
            return contract(format!("invalid stage layers {stage_layers:?} for depth {}", cfg.depth));
        }
        let n0 = cfg.num_patches() as u64;
        let counts: Vec<u64> = target_counts(n0 as usize, rho, stage_layers.len())
            .into_iter()
            .map(|c| c as u64)
            .collect();
        let patches_per_layer = (1..=cfg.depth)
            .map(|l| {
                let passed = stage_layers.iter().filter(|&&s| s <= l).count();
                if passed == 0 {
                    n0
                } else {
                    counts[passed - 1]
                }
            })
            .collect();
        let predictors = match predictor {
            Some(p) => {
                let e = p.feature_width(cfg.heads) as u64;
                (0..stage_layers.len())
                    .map(|k| (if k == 0 { n0 } else { counts[k - 1] }, e, p.d_remap as u64))
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(Self {
            patches_per_layer,
            predictors,
        })
    }
}

pub fn model_cost(cfg: &ViTConfig, plan: &RetentionPlan) -> Result<FlopReport> {
    if plan.patches_per_layer.len() != cfg.depth {
        return contract(format!(
            "plan covers {} layers of a depth-{} model",
            plan.patches_per_layer.len(),
            cfg.depth
        ));
    }
    let d = cfg.embed_dim as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let layers: Vec<LayerCost> = plan
        .patches_per_layer
        .iter()
        .enumerate()
        .map(|(i, &p)| LayerCost {
            layer: i + 1,
            tokens: p + 1,
            attention: attention_cost(p + 1, d),
            mlp: mlp_cost(p + 1, d, hidden),
        })
        .collect();
    let embed = cfg.num_patches() as u64 * cfg.patch_dim() as u64 * d;
    let head = d * cfg.num_classes as u64;
    let predictor: Vec<u64> = plan
        .predictors
        .iter()
        .map(|&(n, e, dr)| predictor_cost(n, e, dr, d))
        .collect();
    let total = embed + head + layers.iter().map(|l| l.attention + l.mlp).sum::<u64>() + predictor.iter().sum::<u64>();
    Ok(FlopReport {
        layers,
        embed,
        head,
        predictor,
        total,
    })
}

impl FlopReport {
    pub fn predictor_total(&self) -> u64 {
        self.predictor.iter().sum()
    }

    pub fn giga(&self) -> f64 {
        self.total as f64 / 1e9
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>5} {:>7} {:>15} {:>15}", "layer", "tokens", "attention", "mlp");
        for l in &self.layers {
            let _ = writeln!(s, "{:>5} {:>7} {:>15} {:>15}", l.layer, l.tokens, l.attention, l.mlp);
        }
        let _ = writeln!(s, "{:<14}{:>15}", "embed", self.embed);
        let _ = writeln!(s, "{:<14}{:>15}", "head", self.head);
        for (k, p) in self.predictor.iter().enumerate() {
            let _ = writeln!(s, "{:<14}{:>15}", format!("predictor.{k}"), p);
        }
        let _ = writeln!(s, "{:<14}{:>15}  ({:.3} G)", "total", self.total, self.giga());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("item,tokens,attention,mlp,cost\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer.{},{},{},{},{}",
                l.layer,
                l.tokens,
                l.attention,
                l.mlp,
                l.attention + l.mlp
            );
        }
        let _ = writeln!(s, "embed,,,,{}", self.embed);
        let _ = writeln!(s, "head,,,,{}", self.head);
        for (k, p) in self.predictor.iter().enumerate() {
            let _ = writeln!(s, "predictor.{k},,,,{p}");
        }
        let _ = writeln!(s, "total,,,,{}", self.total);
        s
    }
}
