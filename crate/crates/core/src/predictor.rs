//! Token relevance predictor: token remapping, scoring MLP and mask sampling.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::params::{Bound, Linear, Norm, ParamStore};
use crate::stats::{FeatureToggles, VarianceForm};
use crate::tensor::Tensor;

pub use crate::selection::{compose_hierarchy, topk_select, RetentionMask, RetentionState};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    /// Width of the remapped token features; 0 disables them.
    pub d_remap: usize,
    pub toggles: FeatureToggles,
    pub shared_across_stages: bool,
    pub variance_form: VarianceForm,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            d_remap: 32,
            toggles: FeatureToggles::default(),
            shared_across_stages: false,
            variance_form: VarianceForm::Squared,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.d_remap.is_multiple_of(2) {
            return Err(Error::Config(format!("d_remap must be even, got {}", self.d_remap)));
        }
        if self.d_remap == 0 && self.toggles.sources() == 0 {
            return Err(Error::Config(
                "predictor has no input: d_remap is 0 and every statistics source is disabled".into(),
            ));
        }
        Ok(())
    }

    /// Per-token feature width E.
    pub fn feature_width(&self, heads: usize) -> usize {
        self.d_remap + self.toggles.stats_width(heads)
    }
}

/// Hidden widths of the scoring MLP for feature width `e`.
pub fn mlp_widths(e: usize) -> (usize, usize) {
    ((e / 2).max(1), (e / 4).max(1))
}

#[derive(Debug, Clone)]
pub struct StagePredictor {
    remap: Option<(Norm, Linear)>,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    d_remap: usize,
}

pub struct Remapped<'t> {
    pub z_local: Var<'t>,
    pub z_global: Var<'t>,
}

impl StagePredictor {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &PredictorConfig,
        d: usize,
        e: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let remap = if cfg.d_remap > 0 {
            Some((
                Norm::init(store, &format!("{prefix}.remap.norm"), d)?,
                Linear::init(store, &format!("{prefix}.remap.fc"), d, cfg.d_remap, rng)?,
            ))
        } else {
            None
        };
        let (h1, h2) = mlp_widths(e);
        Ok(Self {
            remap,
            fc1: Linear::init(store, &format!("{prefix}.score.fc1"), e, h1, rng)?,
            fc2: Linear::init(store, &format!("{prefix}.score.fc2"), h1, h2, rng)?,
            fc3: Linear::init(store, &format!("{prefix}.score.fc3"), h2, 2, rng)?,
            d_remap: cfg.d_remap,
        })
    }

    /// Projects the retained patch tokens (one per row) and splits the
    /// result: the first half is per-token local features, the second half
    /// averaged over the rows is the global feature shared by every token.
    pub fn remap_tokens<'t>(&self, p: &Bound<'t>, tokens: &Var<'t>) -> Result<Option<Remapped<'t>>> {
        let Some((norm, fc)) = &self.remap else {
            return Ok(None);
        };
        let m = tokens.value().rows();
        if m == 0 {
            return contract("no tokens to remap");
        }
        let z = fc.forward(p, &norm.forward(p, tokens)?)?.gelu();
        let half = self.d_remap / 2;
        let z_local = z.slice(0..m, 0..half)?;
        let z_global = z.slice(0..m, half..self.d_remap)?.mean_rows().repeat_rows(m)?;
        Ok(Some(Remapped { z_local, z_global }))
    }

    /// Two-way logits per token; column 0 is "keep".
    pub fn logits<'t>(&self, p: &Bound<'t>, features: &Var<'t>) -> Result<Var<'t>> {
        let e = p.get(self.fc1.weight).value().rows();
        let f = features.value();
        if !f.is_matrix() || f.cols() != e {
            return Err(Error::Dimension {
                op: "score",
                left: f.shape().to_vec(),
                right: vec![e],
            });
        }
        let h = self.fc1.forward(p, features)?.gelu();
        let h = self.fc2.forward(p, &h)?.gelu();
        self.fc3.forward(p, &h)
    }
}

/// Predictors for every sparsification stage.
#[derive(Debug, Clone)]
pub struct Predictors {
    cfg: PredictorConfig,
    params: ParamStore,
    stages: Vec<StagePredictor>,
    count: usize,
}

impl Predictors {
    pub fn new(
        cfg: PredictorConfig,
        embed_dim: usize,
        heads: usize,
        stages: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.feature_width(heads);
        let mut params = ParamStore::new();
        let distinct = if cfg.shared_across_stages {
            stages.min(1)
        } else {
            stages
        };
        let stage_list = (0..distinct)
            .map(|k| StagePredictor::init(&mut params, &format!("predictor.{k}"), &cfg, embed_dim, e, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            params,
            stages: stage_list,
            count: stages,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    /// Number of stages served.
    pub fn stages(&self) -> usize {
        self.count
    }

    /// Predictor for stage `k` (0-based).
    pub fn stage(&self, k: usize) -> &StagePredictor {
        if self.cfg.shared_across_stages {
            &self.stages[0]
        } else {
            &self.stages[k]
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Softmax column 0 of the two-way logits.
pub fn keep_probability<'t>(logits: &Var<'t>) -> Result<Var<'t>> {
    let m = logits.value().rows();
    logits.softmax().slice(0..m, 0..1)?.reshape(vec![m])
}

/// Standard Gumbel noise, one value per token and class.
pub fn sample_gumbel(tokens: usize, rng: &mut impl Rng) -> Tensor {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let data = (0..tokens * 2).map(|_| g.sample(rng)).collect();
    Tensor::new(vec![tokens, 2], data).expect("noise shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSettings {
    pub tau: f64,
    /// Straight-through hard samples; soft relaxed masks otherwise.
    pub hard: bool,
}

pub struct GumbelSample<'t> {
    /// Relaxed keep probability per token.
    pub soft: Var<'t>,
    /// Hard decision (argmax of the relaxed sample, ties kept).
    pub keep: Vec<bool>,
    /// The mask to apply: straight-through hard values, or `soft`.
    pub mask: Var<'t>,
}

/// Relaxed categorical sample `softmax((logits + noise) / τ)`.
pub fn gumbel_mask<'t>(logits: &Var<'t>, noise: &Tensor, settings: GumbelSettings) -> Result<GumbelSample<'t>> {
    // written negated so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(settings.tau > 0.0) {
        return contract(format!("Gumbel temperature must be positive, got {}", settings.tau));
    }
    let shape = logits.shape();
    if noise.shape() != shape.as_slice() || shape.len() != 2 || shape[1] != 2 {
        return Err(Error::Dimension {
            op: "gumbel_mask",
            left: shape,
            right: noise.shape().to_vec(),
        });
    }
    let m = shape[0];
    let tape = logits.tape();
    let y = logits
        .add(&tape.constant(noise.clone()))?
        .scale(1.0 / settings.tau)
        .softmax();
    let soft = y.slice(0..m, 0..1)?.reshape(vec![m])?;
    let yv = y.value();
    let keep: Vec<bool> = (0..m).map(|i| yv.at(i, 0) >= yv.at(i, 1)).collect();
    let mask = if settings.hard {
        let hard = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        soft.straight_through(Tensor::vector(hard))?
    } else {
        soft
    };
    Ok(GumbelSample { soft, keep, mask })
}
