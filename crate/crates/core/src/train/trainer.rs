//! Dense pretraining, teacher-guided fine-tuning with predictors, and
//! evaluation.
//!
//! Each sample gets its own tape; gradients are summed in sample order so a
//! run is bit-reproducible from its seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::engine::{run, Mode, Noise, Selector, SparsifyConfig};
use crate::error::{Error, Result};
use crate::flops::{model_cost, FlopReport, RetentionPlan};
use crate::io::checkpoint;
use crate::losses::{pred_similarity, rate_loss, task_loss, token_similarity, total, LossTerms, LossWeights};
use crate::predictor::Predictors;
use crate::tensor::Tensor;
use crate::train::data::Dataset;
use crate::train::optim::{add_grads, AdamW};
use crate::vit::{Hooks, ViT};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub predictor_lr: f64,
    pub weight_decay: f64,
    /// Gumbel temperature at the first and last fine-tuning epoch,
    /// interpolated geometrically in between.
    pub tau_start: f64,
    pub tau_end: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 6,
            pretrain_lr: 1e-3,
            epochs: 6,
            batch_size: 16,
            backbone_lr: 1e-3,
            predictor_lr: 1e-2,
            weight_decay: 0.05,
            tau_start: 1.0,
            tau_end: 0.1,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pretrain_lr", self.pretrain_lr),
            ("backbone_lr", self.backbone_lr),
            ("predictor_lr", self.predictor_lr),
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Temperature for a 0-based fine-tuning epoch.
    pub fn tau(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Epoch averages over the training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub tau: Option<f64>,
    pub cls: f64,
    pub rate: f64,
    pub pred: f64,
    pub token: f64,
    /// Hard kept-patch fraction per stage.
    pub rho_hat: Vec<f64>,
    /// Training accuracy of the forward pass that produced the losses.
    pub accuracy: f64,
}

pub fn log_csv(entries: &[EpochLog]) -> String {
    let stages = entries.iter().map(|e| e.rho_hat.len()).max().unwrap_or(0);
    let mut s = String::from("phase,epoch,tau,l_cls,l_rate,l_pred,l_token");
    for k in 1..=stages {
        let _ = write!(s, ",rho_hat_{k}");
    }
    s.push_str(",accuracy\n");
    for e in entries {
        let phase = match e.phase {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        };
        let tau = e.tau.map(|t| t.to_string()).unwrap_or_default();
        let _ = write!(
            s,
            "{phase},{},{tau},{},{},{},{}",
            e.epoch + 1,
            e.cls,
            e.rate,
            e.pred,
            e.token
        );
        for k in 0..stages {
            let v = e.rho_hat.get(k).map(|r| r.to_string()).unwrap_or_default();
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", e.accuracy);
    }
    s
}

fn epoch_order(n: usize, seed: u64, salt: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Independent Gumbel stream for one sample in one epoch.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

/// Plain cross-entropy training of the dense backbone.
pub fn pretrain(vit: &mut ViT, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut opt = AdamW::new(vit.params(), cfg.pretrain_lr, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let order = epoch_order(data.len(), cfg.seed, 1, epoch);
        let (mut cls, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Option<Tensor>> = vec![None; vit.params().len()];
            for &i in batch {
                let s = &data.samples[i];
                let tape = Tape::new();
                let p = vit.bind(&tape, true);
                let out = vit.forward(&p, &s.image, &Hooks::default())?;
                let loss = task_loss(&out.logits, &[s.label])?;
                cls += loss.item();
                correct += usize::from(argmax(out.logits.value().data()) == s.label);
                tape.backward(loss.scale(1.0 / batch.len() as f64))?;
                add_grads(&mut grads, p.grads());
            }
            opt.step(vit.params_mut(), &grads)?;
        }
        let n = data.len() as f64;
        logs.push(EpochLog {
            phase: Phase::Pretrain,
            epoch,
            tau: None,
            cls: cls / n,
            rate: 0.0,
            pred: 0.0,
            token: 0.0,
            rho_hat: Vec::new(),
            accuracy: correct as f64 / n,
        });
    }
    Ok(logs)
}

/// Frozen dense copy of a backbone.
#[derive(Debug, Clone)]
pub struct Teacher {
    vit: ViT,
}

/// Teacher outputs for one image: class distribution `[1×C]` and the
/// final normalized tokens, one row per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub probs: Tensor,
    pub tokens: Tensor,
}

impl Teacher {
    pub fn new(vit: &ViT) -> Self {
        Self { vit: vit.clone() }
    }

    /// Loads the backbone weights of a checkpoint into a fresh model of
    /// the given shape.
    pub fn from_checkpoint(path: &Path, template: &ViT) -> Result<Self> {
        let mut vit = template.clone();
        checkpoint::load_into(path, &mut [vit.params_mut()])?;
        Ok(Self { vit })
    }

    pub fn model(&self) -> &ViT {
        &self.vit
    }

    pub fn outputs(&self, image: &crate::vit::Image) -> Result<TeacherOutput> {
        let tape = Tape::new();
        let p = self.vit.bind(&tape, false);
        let out = self.vit.forward(&p, image, &Hooks::default())?;
        Ok(TeacherOutput {
            probs: out.logits.softmax().value().as_ref().clone(),
            tokens: out.tokens.tokens.value().as_ref().clone(),
        })
    }
}

/// Everything fine-tuning needs besides the data.
pub struct Finetune<'a> {
    pub student: &'a mut ViT,
    pub predictors: &'a mut Predictors,
    pub teacher: &'a Teacher,
    pub sparsify: &'a SparsifyConfig,
    pub train: &'a TrainConfig,
    /// Where to write the last good weights if training diverges.
    pub rescue: Option<&'a Path>,
}

struct SampleResult {
    cls: f64,
    rate: f64,
    pred: f64,
    token: f64,
    rho_hat: Vec<f64>,
    correct: bool,
    backbone: Vec<Option<Tensor>>,
    predictor: Vec<Option<Tensor>>,
}

#[allow(clippy::too_many_arguments)]
fn finetune_sample(
    student: &ViT,
    predictors: &Predictors,
    teacher: &TeacherOutput,
    image: &crate::vit::Image,
    label: usize,
    sparsify: &SparsifyConfig,
    weights: &LossWeights,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    let tape = Tape::new();
    let vp = student.bind(&tape, true);
    let pp = predictors.params().bind(&tape, true);
    let selector = Selector::Spot {
        predictors,
        params: &pp,
    };
    let out = run(student, &vp, &selector, image, sparsify, Some(Noise::Sampled(rng)))?;
    let cls = task_loss(&out.logits, &[label])?;
    let rate = if out.rho_hat.is_empty() {
        None
    } else {
        let k = out.rho_hat.len();
        let row = Var::concat_rows(&out.rho_hat)?.reshape(vec![1, k])?;
        let targets: Vec<f64> = (1..=k).map(|i| sparsify.rho.powi(i as i32)).collect();
        Some(rate_loss(&row, &targets)?)
    };
    let pred = pred_similarity(&teacher.probs, &out.logits)?;
    let student_tokens = out.retained_patch_tokens()?;
    let patch_positions: Vec<usize> = out.kept[1..].to_vec();
    let teacher_rows = {
        let d = teacher.tokens.cols();
        let mut v = Vec::with_capacity(patch_positions.len() * d);
        for &p in &patch_positions {
            v.extend_from_slice(teacher.tokens.row(p));
        }
        Tensor::matrix(patch_positions.len(), d, v)?
    };
    let token = token_similarity(&[teacher_rows], &[student_tokens])?;
    let terms = LossTerms {
        cls,
        rate,
        pred: Some(pred),
        token: Some(token),
    };
    let loss = total(&terms, weights)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("fine-tuning loss"));
    }
    tape.backward(loss.scale(scale))?;
    Ok(SampleResult {
        cls: cls.item(),
        rate: rate.map_or(0.0, |r| r.item()),
        pred: pred.item(),
        token: token.item(),
        rho_hat: out.rho_hat_values.clone(),
        correct: argmax(out.logits.value().data()) == label,
        backbone: vp.grads(),
        predictor: pp.grads(),
    })
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NonFiniteGradient(_))
}

/// Joint fine-tuning of backbone and predictors against the teacher.
pub fn finetune(job: Finetune<'_>, data: &Dataset) -> Result<Vec<EpochLog>> {
    let Finetune {
        student,
        predictors,
        teacher,
        sparsify,
        train,
        rescue,
    } = job;
    train.validate()?;
    let mut sparsify = sparsify.clone();
    sparsify.mode = Mode::Training;
    sparsify.validate(student.config().depth)?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let cache: Vec<TeacherOutput> = data
        .samples
        .iter()
        .map(|s| teacher.outputs(&s.image))
        .collect::<Result<_>>()?;
    let mut opt_b = AdamW::new(student.params(), train.backbone_lr, train.weight_decay);
    let mut opt_p = AdamW::new(predictors.params(), train.predictor_lr, train.weight_decay);
    let stages = sparsify.stages();
    let mut logs = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        sparsify.gumbel.tau = train.tau(epoch);
        let order = epoch_order(data.len(), train.seed, 2, epoch);
        let mut sums = [0.0f64; 4];
        let mut rho = vec![0.0; stages];
        let mut correct = 0usize;
        for batch in order.chunks(train.batch_size) {
            let mut gb: Vec<Option<Tensor>> = vec![None; student.params().len()];
            let mut gp: Vec<Option<Tensor>> = vec![None; predictors.params().len()];
            let step = (|| -> Result<()> {
                for &i in batch {
                    let s = &data.samples[i];
                    let mut rng = sample_rng(train.seed, epoch, i);
                    let r = finetune_sample(
                        student,
                        predictors,
                        &cache[i],
                        &s.image,
                        s.label,
                        &sparsify,
                        &train.weights,
                        1.0 / batch.len() as f64,
                        &mut rng,
                    )?;
                    for (acc, v) in sums.iter_mut().zip([r.cls, r.rate, r.pred, r.token]) {
                        *acc += v;
                    }
                    rho.iter_mut().zip(&r.rho_hat).for_each(|(a, v)| *a += v);
                    correct += usize::from(r.correct);
                    add_grads(&mut gb, r.backbone);
                    add_grads(&mut gp, r.predictor);
                }
                // check both before touching either store
                for (store, grads) in [(student.params(), &gb), (predictors.params(), &gp)] {
                    for (id, g) in store.ids().zip(grads.iter()) {
                        if g.as_ref().is_some_and(|g| !g.all_finite()) {
                            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                        }
                    }
                }
                opt_b.step(student.params_mut(), &gb)?;
                opt_p.step(predictors.params_mut(), &gp)
            })();
            if let Err(e) = step {
                if !is_divergence(&e) {
                    return Err(e);
                }
                let saved = match rescue {
                    Some(path) => {
                        checkpoint::save(path, &[student.params(), predictors.params()])?;
                        Some(PathBuf::from(path))
                    }
                    None => None,
                };
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    checkpoint: saved,
                });
            }
        }
        let n = data.len() as f64;
        logs.push(EpochLog {
            phase: Phase::Finetune,
            epoch,
            tau: Some(sparsify.gumbel.tau),
            cls: sums[0] / n,
            rate: sums[1] / n,
            pred: sums[2] / n,
            token: sums[3] / n,
            rho_hat: rho.iter().map(|r| r / n).collect(),
            accuracy: correct as f64 / n,
        });
    }
    Ok(logs)
}

/// How tokens are chosen at evaluation time.
pub enum EvalSelector<'a> {
    Dense,
    Spot(&'a Predictors),
    Heuristic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub flops: FlopReport,
    /// Mean kept-patch fraction per stage.
    pub kept: Vec<f64>,
}

/// Top-1 accuracy with inference-mode pruning, plus the compute of one
/// forward pass.
pub fn evaluate(
    vit: &ViT,
    selector: EvalSelector<'_>,
    data: &Dataset,
    sparsify: &SparsifyConfig,
) -> Result<Evaluation> {
    let cfg = vit.config();
    let mut sparsify = sparsify.clone();
    sparsify.mode = Mode::Inference;
    let (plan, stages) = match selector {
        EvalSelector::Dense => (RetentionPlan::dense(cfg), 0),
        EvalSelector::Spot(p) => (
            RetentionPlan::sparse(cfg, sparsify.rho, &sparsify.stage_layers, Some(p.config()))?,
            sparsify.stages(),
        ),
        EvalSelector::Heuristic => (
            RetentionPlan::sparse(cfg, sparsify.rho, &sparsify.stage_layers, None)?,
            sparsify.stages(),
        ),
    };
    let mut correct = 0usize;
    let mut kept = vec![0.0; stages];
    for s in &data.samples {
        let tape = Tape::new();
        let vp = vit.bind(&tape, false);
        let logits = match selector {
            EvalSelector::Dense => vit.forward(&vp, &s.image, &Hooks::default())?.logits,
            EvalSelector::Spot(predictors) => {
                let pp = predictors.params().bind(&tape, false);
                let sel = Selector::Spot {
                    predictors,
                    params: &pp,
                };
                let out = run(vit, &vp, &sel, &s.image, &sparsify, None)?;
                kept.iter_mut().zip(&out.rho_hat_values).for_each(|(a, v)| *a += v);
                out.logits
            }
            EvalSelector::Heuristic => {
                let out = run(vit, &vp, &Selector::Heuristic, &s.image, &sparsify, None)?;
                kept.iter_mut().zip(&out.rho_hat_values).for_each(|(a, v)| *a += v);
                out.logits
            }
        };
        correct += usize::from(argmax(logits.value().data()) == s.label);
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: if data.is_empty() { 0.0 } else { correct as f64 / n },
        flops: model_cost(cfg, &plan)?,
        kept: kept.iter().map(|k| k / n).collect(),
    })
}
