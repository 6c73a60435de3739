//! Retention masks over a token sequence and the deterministic selection rule.
//!
//! Masks are indexed by sequence position: position 0 is the class token,
//! position `i + 1` is patch `i`.

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RetentionMask {
    bits: Vec<bool>,
}

impl RetentionMask {
    /// Everything retained, for `patches` patch tokens.
    pub fn full(patches: usize) -> Self {
        Self {
            bits: vec![true; patches + 1],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.first() != Some(&true) {
            return contract("retention mask must keep the class token at position 0");
        }
        Ok(Self { bits })
    }

    /// Mask over `len` positions keeping exactly `positions` (class token added).
    pub fn from_positions(len: usize, positions: &[usize]) -> Result<Self> {
        let mut bits = vec![false; len];
        bits[0] = true;
        for &p in positions {
            if p >= len {
                return contract(format!("position {p} outside a mask of length {len}"));
            }
            bits[p] = true;
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, pos: usize) -> bool {
        self.bits[pos]
    }

    /// Retained positions in increasing order, class token first.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn kept_patches(&self) -> usize {
        self.bits[1..].iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Retains the `target` patch tokens with the highest `keep_prob` among
/// those retained by `prev`. Ties go to the lower index.
///
/// `keep_prob[i]` scores patch `i` (sequence position `i + 1`).
pub fn topk_select(keep_prob: &[f64], target: usize, prev: &RetentionMask) -> Result<RetentionMask> {
    if target < 1 {
        return contract("target token count must be at least 1");
    }
    if keep_prob.len() + 1 != prev.len() {
        return contract(format!(
            "{} scores for a mask over {} patches",
            keep_prob.len(),
            prev.len() - 1
        ));
    }
    let mut candidates: Vec<usize> = (0..keep_prob.len()).filter(|&i| prev.get(i + 1)).collect();
    if target > candidates.len() {
        return contract(format!(
            "cannot keep {target} tokens out of {} still retained",
            candidates.len()
        ));
    }
    candidates.sort_by(|&a, &b| keep_prob[b].total_cmp(&keep_prob[a]).then(a.cmp(&b)));
    let chosen: Vec<usize> = candidates[..target].iter().map(|&i| i + 1).collect();
    RetentionMask::from_positions(prev.len(), &chosen)
}

/// Validated stage masks with their kept patch counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetentionState {
    pub masks: Vec<RetentionMask>,
    pub kept_counts: Vec<usize>,
}

impl RetentionState {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Stage (1-based) at which each position was first dropped; 0 if never.
    pub fn pruned_at(&self) -> Vec<usize> {
        let Some(first) = self.masks.first() else {
            return Vec::new();
        };
        (0..first.len())
            .map(|p| self.masks.iter().position(|m| !m.get(p)).map_or(0, |k| k + 1))
            .collect()
    }
}

/// Checks that a token dropped at stage k stays dropped afterwards.
pub fn compose_hierarchy(masks: Vec<RetentionMask>) -> Result<RetentionState> {
    if masks.is_empty() {
        return contract("a retention state needs at least one stage");
    }
    let len = masks[0].len();
    for (k, m) in masks.iter().enumerate() {
        if m.len() != len {
            return contract(format!("stage {} mask has length {}, expected {len}", k + 1, m.len()));
        }
        if !m.get(0) {
            return Err(Error::Hierarchy { stage: k + 1, token: 0 });
        }
        if k > 0 {
            if let Some(t) = (0..len).find(|&t| m.get(t) && !masks[k - 1].get(t)) {
                return Err(Error::Hierarchy { stage: k + 1, token: t });
            }
        }
    }
    let kept_counts = masks.iter().map(RetentionMask::kept_patches).collect();
    Ok(RetentionState { masks, kept_counts })
}
