//! Runs the backbone with relevance predictors inserted at the stage layers.
//!
//! The predictor at stage layer `l` sees the attention maps of layers
//! `1..l` (exclusive) and the tokens entering layer `l`; its decision takes
//! effect from layer `l` onward. In training mode dropped tokens stay in the
//! sequence as masked attention columns; in inference mode they are removed.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::baseline::HeuristicState;
use crate::error::{contract, Error, Result};
use crate::params::Bound;
use crate::predictor::{gumbel_mask, keep_probability, sample_gumbel, GumbelSettings, Predictors};
use crate::selection::{compose_hierarchy, topk_select, RetentionMask, RetentionState};
use crate::stats::{assemble_features, descriptor, head_average, CrossLayerAccumulator};
use crate::tensor::Tensor;
use crate::vit::{physical_prune, Image, TokenSequence, ViT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel-sampled masks applied as attention masks.
    Training,
    /// Deterministic top-k with physical removal.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsifyConfig {
    pub rho: f64,
    pub stage_layers: Vec<usize>,
    pub mode: Mode,
    pub gumbel: GumbelSettings,
}

impl SparsifyConfig {
    pub fn new(rho: f64, stage_layers: Vec<usize>, mode: Mode) -> Self {
        Self {
            rho,
            stage_layers,
            mode,
            gumbel: GumbelSettings { tau: 1.0, hard: true },
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.stage_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage layers {:?} must be strictly increasing",
                self.stage_layers
            )));
        }
        if let Some(&l) = self.stage_layers.iter().find(|&&l| l < 2 || l > depth) {
            return Err(Error::Config(format!(
                "stage layer {l} outside 2..={depth}; a stage needs at least one earlier layer"
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_layers.len()
    }
}

/// One layer after each quarter of the depth: `floor(k·depth/4) + 1`.
pub fn stage_layers(depth: usize, stages: usize) -> Result<Vec<usize>> {
    if depth < 4 || stages > 3 {
        return Err(Error::Config(format!(
            "the quarter-mark rule needs depth ≥ 4 and at most 3 stages (depth {depth}, {stages} stages)"
        )));
    }
    Ok((1..=stages).map(|k| k * depth / 4 + 1).collect())
}

/// Patch tokens kept after each stage: `⌈ρ^k·N_0⌉`, at least 1.
pub fn target_counts(n0: usize, rho: f64, stages: usize) -> Vec<usize> {
    (1..=stages)
        .map(|k| {
            let exact = rho.powi(k as i32) * n0 as f64;
            // absorb representation error such as 0.7 * 0.7 * 100 = 49.000000000000007
            let rounded = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
            rounded.clamp(1, n0.max(1))
        })
        .collect()
}

/// Chooses which tokens survive each stage.
pub enum Selector<'a, 't> {
    Spot {
        predictors: &'a Predictors,
        params: &'a Bound<'t>,
    },
    /// Mean class-token attention (inference only).
    Heuristic,
}

/// Source of Gumbel noise for training-mode sampling.
pub enum Noise<'a> {
    Sampled(&'a mut ChaCha8Rng),
    /// One `m×2` tensor per stage, `m` the patch tokens entering it.
    Fixed(&'a [Tensor]),
}

pub struct RunOutput<'t> {
    pub logits: Var<'t>,
    /// Final normalized tokens, one row per entry of `rows`.
    pub tokens: Var<'t>,
    /// Original position of each row of `tokens`.
    pub rows: Vec<usize>,
    /// Positions retained after the last stage, class token first.
    pub kept: Vec<usize>,
    pub state: RetentionState,
    /// Differentiable kept-rate per stage (training mode).
    pub rho_hat: Vec<Var<'t>>,
    /// Kept patch fraction per stage from the hard masks.
    pub rho_hat_values: Vec<f64>,
    /// `maps[l][h]` as computed, on the rows present at that layer.
    pub maps: Vec<Vec<Var<'t>>>,
}

impl<'t> RunOutput<'t> {
    /// Final representations of the retained patch tokens.
    pub fn retained_patch_tokens(&self) -> Result<Var<'t>> {
        let rows: Vec<usize> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != 0 && self.kept.binary_search(p).is_ok())
            .map(|(r, _)| r)
            .collect();
        self.tokens.select_rows(&rows)
    }
}

fn stage_features<'t>(
    predictors: &Predictors,
    k: usize,
    params: &Bound<'t>,
    patch_tokens: &Var<'t>,
    last_maps: &[Var<'t>],
    acc: &CrossLayerAccumulator<'t>,
) -> Result<Var<'t>> {
    let cfg = predictors.config();
    let t = cfg.toggles;
    let stage = predictors.stage(k);
    let remapped = stage.remap_tokens(params, patch_tokens)?;
    let cols = t.columns();
    let select = |d: Var<'t>| -> Result<Var<'t>> {
        if cols.len() == 6 {
            Ok(d)
        } else {
            let rows: Vec<usize> = (0..d.value().rows()).collect();
            d.gather(&rows, &cols)
        }
    };
    let group = |ds: Vec<Var<'t>>| -> Result<Vec<Var<'t>>> {
        let ds = if t.per_head { ds } else { vec![head_average(&ds)?] };
        ds.into_iter().map(select).collect()
    };
    let heads = last_maps.len();
    let form = cfg.variance_form;
    let d_a = if t.include_a {
        group(last_maps.iter().map(|m| descriptor(m, form)).collect::<Result<_>>()?)?
    } else {
        Vec::new()
    };
    let d_m = if t.include_m {
        group(
            (0..heads)
                .map(|h| descriptor(&acc.mean(h), form))
                .collect::<Result<_>>()?,
        )?
    } else {
        Vec::new()
    };
    let d_s = if t.include_sigma {
        group(
            (0..heads)
                .map(|h| descriptor(&acc.variance(h), form))
                .collect::<Result<_>>()?,
        )?
    } else {
        Vec::new()
    };
    assemble_features(
        remapped.as_ref().map(|r| &r.z_global),
        remapped.as_ref().map(|r| &r.z_local),
        &d_a,
        &d_m,
        &d_s,
    )
}

/// Forward pass with token sparsification.
pub fn run<'t>(
    vit: &ViT,
    vit_params: &Bound<'t>,
    selector: &Selector<'_, 't>,
    image: &Image,
    cfg: &SparsifyConfig,
    mut noise: Option<Noise<'_>>,
) -> Result<RunOutput<'t>> {
    let depth = vit.config().depth;
    cfg.validate(depth)?;
    let training = cfg.mode == Mode::Training;
    let needs_acc = match selector {
        Selector::Spot { predictors, .. } => {
            if predictors.stages() != cfg.stages() {
                return Err(Error::Config(format!(
                    "{} predictor stages for {} stage layers",
                    predictors.stages(),
                    cfg.stages()
                )));
            }
            let t = predictors.config().toggles;
            t.include_m || t.include_sigma
        }
        Selector::Heuristic => {
            if training {
                return contract("the heuristic selector has no training mode");
            }
            false
        }
    };
    if training && noise.is_none() && !cfg.stage_layers.is_empty() {
        return contract("training mode needs a noise source");
    }

    let n0 = vit.config().num_patches();
    let targets = target_counts(n0, cfg.rho, cfg.stages());
    let last_stage = cfg.stage_layers.last().copied().unwrap_or(0);

    let mut seq: TokenSequence<'t> = vit.embed(vit_params, image)?;
    let tape = seq.tokens.tape();
    let full_len = seq.full_len;
    let mut kept: Vec<usize> = (0..full_len).collect();
    let mut mask_var: Option<Var<'t>> = None;
    let mut acc = CrossLayerAccumulator::new();
    let mut heuristic = HeuristicState::new();
    let mut last_maps: Vec<Var<'t>> = Vec::new();
    let mut masks = Vec::with_capacity(cfg.stages());
    let mut rho_hat = Vec::new();
    let mut rho_hat_values = Vec::new();
    let mut all_maps = Vec::with_capacity(depth);

    for layer in 1..=depth {
        if let Some(k) = cfg.stage_layers.iter().position(|&l| l == layer) {
            // Rows of the current sequence holding retained patch tokens.
            let patch_rows: Vec<usize> = if training {
                kept[1..].to_vec()
            } else {
                (1..seq.len()).collect()
            };
            let prev = RetentionMask::from_positions(full_len, &kept[1..])?;
            let new_kept: Vec<usize> = match selector {
                Selector::Spot { predictors, params } => {
                    let patch_tokens = seq.tokens.select_rows(&patch_rows)?;
                    let features = stage_features(predictors, k, params, &patch_tokens, &last_maps, &acc)?;
                    let logits = predictors.stage(k).logits(params, &features)?;
                    if training && cfg.rho >= 1.0 {
                        // nothing to prune at full rate; sampling would only add noise
                        let frac = patch_rows.len() as f64 / n0 as f64;
                        rho_hat.push(tape.constant(Tensor::vector(vec![frac])));
                        kept.clone()
                    } else if training {
                        let m = patch_rows.len();
                        let eps = match noise.as_mut().expect("checked above") {
                            Noise::Sampled(rng) => sample_gumbel(m, *rng),
                            Noise::Fixed(list) => list
                                .get(k)
                                .cloned()
                                .ok_or_else(|| Error::Contract(format!("no fixed noise for stage {}", k + 1)))?,
                        };
                        let mut sample = gumbel_mask(&logits, &eps, cfg.gumbel)?;
                        let mut mask = sample.mask;
                        if cfg.gumbel.hard && !sample.keep.iter().any(|&b| b) {
                            // never leave a stage empty: keep the most likely token
                            let soft = sample.soft.value();
                            let best = (0..m).fold(0, |b, i| if soft.data()[i] > soft.data()[b] { i } else { b });
                            sample.keep[best] = true;
                            let hard = sample.keep.iter().map(|&b| f64::from(u8::from(b))).collect();
                            mask = sample.soft.straight_through(Tensor::vector(hard))?;
                        }
                        if let Some(prev_var) = &mask_var {
                            mask = mask.mul(&prev_var.index(&kept[1..])?)?;
                        }
                        rho_hat.push(mask.sum().scale(1.0 / n0 as f64));
                        let one = tape.constant(Tensor::vector(vec![1.0]));
                        let full = Var::concat_rows(&[one, mask])?.scatter(&kept, full_len)?;
                        mask_var = Some(full);
                        if cfg.gumbel.hard {
                            std::iter::once(0)
                                .chain(kept[1..].iter().zip(&sample.keep).filter(|(_, &b)| b).map(|(&p, _)| p))
                                .collect()
                        } else {
                            kept.clone()
                        }
                    } else {
                        let probs = keep_probability(&logits)?.value();
                        select_top(probs.data(), &kept, &prev, targets[k], n0)?
                    }
                }
                Selector::Heuristic => select_top(&heuristic.scores()?, &kept, &prev, targets[k], n0)?,
            };
            let mask = RetentionMask::from_positions(full_len, &new_kept[1..])?;
            if !training {
                seq = physical_prune(&seq, &mask)?;
            }
            let relative: Vec<usize> = new_kept
                .iter()
                .map(|p| kept.binary_search(p).expect("subset"))
                .collect();
            if layer < last_stage {
                acc.shrink(&relative)?;
                heuristic.shrink(&relative)?;
            }
            rho_hat_values.push(mask.kept_patches() as f64 / n0 as f64);
            masks.push(mask);
            kept = new_kept;
        }

        let (x, maps) = vit.block(vit_params, layer, &seq.tokens, mask_var.as_ref())?;
        seq.tokens = x;
        if layer < last_stage {
            let sub: Vec<Var<'t>> = if training && kept.len() < full_len {
                maps.iter().map(|m| m.gather(&kept, &kept)).collect::<Result<_>>()?
            } else {
                maps.clone()
            };
            if needs_acc {
                acc.accumulate(&sub)?;
            }
            if matches!(selector, Selector::Heuristic) {
                let values: Vec<Tensor> = sub.iter().map(|m| m.value().as_ref().clone()).collect();
                heuristic.accumulate(&values)?;
            }
            last_maps = sub;
        }
        all_maps.push(maps);
    }

    let (logits, tokens) = vit.head(vit_params, &seq.tokens)?;
    let state = if masks.is_empty() {
        RetentionState::default()
    } else {
        compose_hierarchy(masks)?
    };
    Ok(RunOutput {
        logits,
        tokens,
        rows: seq.positions.clone(),
        kept,
        state,
        rho_hat,
        rho_hat_values,
        maps: all_maps,
    })
}

/// Top-k over the scores of the currently retained patches (`scores[i]`
/// belongs to `kept[i + 1]`).
fn select_top(scores: &[f64], kept: &[usize], prev: &RetentionMask, target: usize, n0: usize) -> Result<Vec<usize>> {
    let mut full = vec![f64::NEG_INFINITY; n0];
    for (&p, &s) in kept[1..].iter().zip(scores) {
        full[p - 1] = s;
    }
    Ok(topk_select(&full, target, prev)?.positions())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_mark_stage_layers() {
        assert_eq!(stage_layers(12, 3).unwrap(), vec![4, 7, 10]);
        assert_eq!(stage_layers(16, 3).unwrap(), vec![5, 9, 13]);
        assert_eq!(stage_layers(8, 3).unwrap(), vec![3, 5, 7]);
        assert!(matches!(stage_layers(3, 1), Err(Error::Config(_))));
        assert!(stage_layers(12, 4).is_err());
    }

    #[test]
    fn target_count_examples() {
        assert_eq!(target_counts(196, 1.0, 3), vec![196; 3]);
        assert_eq!(target_counts(196, 0.7, 3), vec![138, 97, 68]);
        assert_eq!(target_counts(1, 0.7, 3), vec![1, 1, 1]);
        assert_eq!(target_counts(100, 0.7, 2), vec![70, 49]);
        assert_eq!(target_counts(64, 0.7, 3), vec![45, 32, 22]);
        for n0 in 1..300 {
            let c = target_counts(n0, 0.55, 3);
            assert!(c.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn config_validation() {
        let ok = SparsifyConfig::new(0.7, vec![2, 3], Mode::Inference);
        assert!(ok.validate(4).is_ok());
        assert!(SparsifyConfig::new(0.0, vec![2], Mode::Inference).validate(4).is_err());
        assert!(SparsifyConfig::new(0.7, vec![3, 2], Mode::Inference)
            .validate(4)
            .is_err());
        assert!(SparsifyConfig::new(0.7, vec![1], Mode::Inference).validate(4).is_err());
        assert!(SparsifyConfig::new(0.7, vec![5], Mode::Inference).validate(4).is_err());
    }
}
