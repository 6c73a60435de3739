//! Per-token descriptors of attention maps and cross-layer accumulation.
//!
//! A descriptor is an N×6 matrix with columns
//! `[cls_out, cls_in, μ_row, μ_col, var_row, var_col]` where N counts patch
//! tokens only. Everything works on tape variables so that gradients reach
//! the attention maps.

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const DESCRIPTOR_COLUMNS: [&str; 6] = ["cls_out", "cls_in", "mu_row", "mu_col", "var_row", "var_col"];

/// What the two variance columns hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceForm {
    #[default]
    Squared,
    StdDev,
}

pub struct MapPartition<'t> {
    /// First row without the top-left entry.
    pub cls_out: Var<'t>,
    /// First column without the top-left entry.
    pub cls_in: Var<'t>,
    pub non_cls: Var<'t>,
}

pub fn partition<'t>(map: &Var<'t>) -> Result<MapPartition<'t>> {
    let shape = map.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return contract(format!("attention map must be square, got {shape:?}"));
    }
    let n = shape[0] - 1;
    if n == 0 {
        return contract("attention map has no patch tokens");
    }
    Ok(MapPartition {
        cls_out: map.slice(0..1, 1..n + 1)?.reshape(vec![n])?,
        cls_in: map.slice(1..n + 1, 0..1)?.reshape(vec![n])?,
        non_cls: map.slice(1..n + 1, 1..n + 1)?,
    })
}

pub struct Moments<'t> {
    pub mu_row: Var<'t>,
    pub mu_col: Var<'t>,
    pub var_row: Var<'t>,
    pub var_col: Var<'t>,
}

/// Population mean and variance of each row and each column.
pub fn row_col_moments<'t>(non_cls: &Var<'t>, form: VarianceForm) -> Result<Moments<'t>> {
    let shape = non_cls.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return contract(format!("moments need a nonempty square matrix, got {shape:?}"));
    }
    let mu_row = non_cls.mean_cols();
    let mu_col = non_cls.mean_rows();
    let mut var_row = non_cls.add_col(&mu_row.neg())?.square().mean_cols();
    let mut var_col = non_cls.add_row(&mu_col.neg())?.square().mean_rows();
    if form == VarianceForm::StdDev {
        var_row = var_row.sqrt();
        var_col = var_col.sqrt();
    }
    Ok(Moments {
        mu_row,
        mu_col,
        var_row,
        var_col,
    })
}

pub fn build_descriptor<'t>(p: &MapPartition<'t>, m: &Moments<'t>) -> Result<Var<'t>> {
    let n = p.cls_out.value().numel();
    let cols = [p.cls_out, p.cls_in, m.mu_row, m.mu_col, m.var_row, m.var_col];
    if cols.iter().any(|c| c.value().numel() != n) {
        return contract("descriptor columns disagree on the token count");
    }
    let cols = cols.iter().map(|c| c.reshape(vec![n, 1])).collect::<Result<Vec<_>>>()?;
    Var::concat_cols(&cols)
}

/// Partition, moments and assembly in one step.
pub fn descriptor<'t>(map: &Var<'t>, form: VarianceForm) -> Result<Var<'t>> {
    let p = partition(map)?;
    let m = row_col_moments(&p.non_cls, form)?;
    build_descriptor(&p, &m)
}

pub fn head_average<'t>(descriptors: &[Var<'t>]) -> Result<Var<'t>> {
    let Some(first) = descriptors.first() else {
        return contract("cannot average an empty list of heads");
    };
    let mut acc = *first;
    for d in &descriptors[1..] {
        acc = acc.add(d)?;
    }
    if descriptors.len() == 1 {
        return Ok(acc);
    }
    Ok(acc.scale(1.0 / descriptors.len() as f64))
}

/// Running per-head elementwise mean and population variance of attention
/// maps across layers, restricted to the currently retained tokens.
pub struct CrossLayerAccumulator<'t> {
    mean: Vec<Var<'t>>,
    m2: Vec<Var<'t>>,
    count: usize,
    size: usize,
}

impl<'t> Default for CrossLayerAccumulator<'t> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t> CrossLayerAccumulator<'t> {
    pub fn new() -> Self {
        Self {
            mean: Vec::new(),
            m2: Vec::new(),
            count: 0,
            size: 0,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.count
    }

    /// Side length of the accumulated maps (retained tokens plus class).
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn heads(&self) -> usize {
        self.mean.len()
    }

    /// Welford update with one layer's per-head maps.
    pub fn accumulate(&mut self, maps: &[Var<'t>]) -> Result<()> {
        let Some(first) = maps.first() else {
            return contract("no attention maps to accumulate");
        };
        let shape = first.shape();
        if maps.iter().any(|m| m.shape() != shape) || shape.len() != 2 || shape[0] != shape[1] {
            return contract("per-head maps must be square and share a shape");
        }
        if self.count == 0 {
            let tape = first.tape();
            self.size = shape[0];
            self.mean = maps.to_vec();
            self.m2 = maps.iter().map(|_| tape.constant(Tensor::zeros(&shape))).collect();
            self.count = 1;
            return Ok(());
        }
        if shape[0] != self.size || maps.len() != self.mean.len() {
            return Err(Error::Contract(format!(
                "accumulator holds {} heads of {}×{} maps but received {} of {:?} without a prune event",
                self.mean.len(),
                self.size,
                self.size,
                maps.len(),
                shape
            )));
        }
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for (h, x) in maps.iter().enumerate() {
            let delta = x.sub(&self.mean[h])?;
            let mean = self.mean[h].add(&delta.scale(inv))?;
            let delta2 = x.sub(&mean)?;
            self.m2[h] = self.m2[h].add(&delta.mul(&delta2)?)?;
            self.mean[h] = mean;
        }
        Ok(())
    }

    /// Restricts rows and columns to `keep` (indices into the current maps).
    pub fn shrink(&mut self, keep: &[usize]) -> Result<()> {
        if keep.first() != Some(&0) {
            return contract("shrink must keep the class token at index 0");
        }
        if keep.len() == self.size {
            return Ok(());
        }
        for h in 0..self.mean.len() {
            self.mean[h] = self.mean[h].gather(keep, keep)?;
            self.m2[h] = self.m2[h].gather(keep, keep)?;
        }
        self.size = keep.len();
        Ok(())
    }

    pub fn mean(&self, head: usize) -> Var<'t> {
        self.mean[head]
    }

    pub fn variance(&self, head: usize) -> Var<'t> {
        self.m2[head].scale(1.0 / self.count as f64)
    }
}

/// Which descriptor sources and columns enter the predictor features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureToggles {
    pub per_head: bool,
    pub include_a: bool,
    pub include_m: bool,
    pub include_sigma: bool,
    pub include_mu: bool,
    pub include_var: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        Self {
            per_head: true,
            include_a: true,
            include_m: true,
            include_sigma: true,
            include_mu: true,
            include_var: true,
        }
    }
}

impl FeatureToggles {
    pub fn columns(&self) -> Vec<usize> {
        let mut c = vec![0, 1];
        if self.include_mu {
            c.extend([2, 3]);
        }
        if self.include_var {
            c.extend([4, 5]);
        }
        c
    }

    pub fn sources(&self) -> usize {
        [self.include_a, self.include_m, self.include_sigma]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Width contributed by the statistics for `heads` attention heads.
    pub fn stats_width(&self, heads: usize) -> usize {
        let groups = if self.per_head { heads } else { 1 };
        self.columns().len() * self.sources() * groups
    }
}

/// `[z_global, z_local, D^A heads, D^M heads, D^Σ heads]`, skipping absent parts.
pub fn assemble_features<'t>(
    z_global: Option<&Var<'t>>,
    z_local: Option<&Var<'t>>,
    d_a: &[Var<'t>],
    d_m: &[Var<'t>],
    d_sigma: &[Var<'t>],
) -> Result<Var<'t>> {
    let parts: Vec<Var<'t>> = z_global
        .into_iter()
        .chain(z_local)
        .chain(d_a)
        .chain(d_m)
        .chain(d_sigma)
        .copied()
        .collect();
    let Some(first) = parts.first() else {
        return contract("no feature sources enabled");
    };
    let n = first.value().rows();
    if let Some(bad) = parts.iter().find(|p| p.value().rows() != n) {
        return Err(Error::Dimension {
            op: "assemble_features",
            left: first.shape(),
            right: bad.shape(),
        });
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    Var::concat_cols(&parts)
}

/// Header for a stats dump with `heads` heads and all three sources.
pub fn stats_header(heads: usize) -> Vec<String> {
    let mut names = vec!["token".to_string()];
    for src in ["A", "M", "Sigma"] {
        for h in 0..heads {
            for col in DESCRIPTOR_COLUMNS {
                names.push(format!("{src}.h{h}.{col}"));
            }
        }
    }
    names
}
