//! Plain-text run configuration: `key = value` lines, `#` comments.
//!
//! Values are resolved as defaults, then the file, then command-line
//! overrides, later settings winning. `preset` is applied before every
//! other key so individual model keys can refine it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::engine::{stage_layers, Mode, SparsifyConfig};
use crate::error::{Error, Result};
use crate::io::ppm::DEFAULT_SHADES;
use crate::predictor::PredictorConfig;
use crate::stats::VarianceForm;
use crate::train::data::SyntheticSpec;
use crate::train::trainer::TrainConfig;
use crate::vit::ViTConfig;

/// Everything a subcommand needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub predictor: PredictorConfig,
    pub rho: f64,
    /// `None` places stages after each of the first three depth quarters.
    pub stages: Option<Vec<usize>>,
    pub mode: Mode,
    pub train: TrainConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise: f64,
    pub square: usize,
    pub data_seed: u64,
    /// Dataset files replacing the synthetic train/eval sets.
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub shades: Vec<f64>,
    /// Evaluation-set image used by `visualize` and `stats-dump`.
    pub sample: usize,
    pub variants: Vec<String>,
}

pub const DEFAULT_VARIANTS: [&str; 9] = [
    "full", "no_mu", "no_var", "no_cross", "remap_0", "remap_16", "remap_64", "head_avg", "shared",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::desk(),
            predictor: PredictorConfig::default(),
            rho: 0.7,
            stages: None,
            mode: Mode::Inference,
            train: TrainConfig::default(),
            train_samples: 256,
            eval_samples: 128,
            noise: 0.1,
            square: 12,
            data_seed: 0,
            train_data: None,
            eval_data: None,
            checkpoint: None,
            shades: DEFAULT_SHADES.to_vec(),
            sample: 0,
            variants: DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// `(line, key, value)` triples from a config text.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key = value, found `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "missing key".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, found `{v}`")),
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(x.trim())).collect()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn preset(v: &str) -> std::result::Result<ViTConfig, String> {
    match v {
        "desk" => Ok(ViTConfig::desk()),
        "deit_small" => Ok(ViTConfig::deit_small()),
        "deit_tiny" => Ok(ViTConfig::deit_tiny()),
        _ => Err(format!("unknown preset `{v}` (desk, deit_small, deit_tiny)")),
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let p = &mut self.predictor;
        let t = &mut self.train;
        match key {
            "preset" => {
                self.model = preset(v)?;
                // the desk model uses a narrow remap; full-size presets remap at full width
                p.d_remap = if v == "desk" {
                    PredictorConfig::default().d_remap
                } else {
                    self.model.embed_dim
                };
            }
            "image_size" => m.image_size = num(v)?,
            "patch_size" => m.patch_size = num(v)?,
            "channels" => m.channels = num(v)?,
            "embed_dim" => m.embed_dim = num(v)?,
            "depth" => m.depth = num(v)?,
            "heads" => m.heads = num(v)?,
            "mlp_ratio" => m.mlp_ratio = num(v)?,
            "num_classes" => m.num_classes = num(v)?,
            "rho" => self.rho = num(v)?,
            "stages" => self.stages = if v == "auto" { None } else { Some(list(v)?) },
            "mode" => {
                self.mode = match v {
                    "training" => Mode::Training,
                    "inference" => Mode::Inference,
                    _ => return Err(format!("mode must be training or inference, found `{v}`")),
                }
            }
            "d_remap" => p.d_remap = num(v)?,
            "per_head" => p.toggles.per_head = flag(v)?,
            "include_a" => p.toggles.include_a = flag(v)?,
            "include_m" => p.toggles.include_m = flag(v)?,
            "include_sigma" => p.toggles.include_sigma = flag(v)?,
            "include_mu" => p.toggles.include_mu = flag(v)?,
            "include_var" => p.toggles.include_var = flag(v)?,
            "shared_predictor" => p.shared_across_stages = flag(v)?,
            "variance_form" => {
                p.variance_form = match v {
                    "squared" => VarianceForm::Squared,
                    "std" => VarianceForm::StdDev,
                    _ => return Err(format!("variance_form must be squared or std, found `{v}`")),
                }
            }
            "pretrain_epochs" => t.pretrain_epochs = num(v)?,
            "pretrain_lr" => t.pretrain_lr = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "backbone_lr" => t.backbone_lr = num(v)?,
            "predictor_lr" => t.predictor_lr = num(v)?,
            "weight_decay" => t.weight_decay = num(v)?,
            "tau_start" => t.tau_start = num(v)?,
            "tau_end" => t.tau_end = num(v)?,
            "lambda_rate" => t.weights.rate = num(v)?,
            "lambda_pred" => t.weights.pred = num(v)?,
            "lambda_token" => t.weights.token = num(v)?,
            "seed" => t.seed = num(v)?,
            "train_samples" => self.train_samples = num(v)?,
            "eval_samples" => self.eval_samples = num(v)?,
            "noise" => self.noise = num(v)?,
            "square" => self.square = num(v)?,
            "data_seed" => self.data_seed = num(v)?,
            "train_data" => self.train_data = path(v),
            "eval_data" => self.eval_data = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "shades" => self.shades = list(v)?,
            "sample" => self.sample = num(v)?,
            "variants" => {
                self.variants = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `(line, key, value)` entries; `preset` entries go first.
    pub fn apply(&mut self, entries: &[(usize, String, String)]) -> Result<()> {
        let (presets, rest): (Vec<_>, Vec<_>) = entries.iter().partition(|(_, k, _)| k == "preset");
        for (line, k, v) in presets.into_iter().chain(rest) {
            self.set(k, v).map_err(|message| Error::Parse {
                line: *line,
                message: if *line == 0 {
                    format!("--set {k}: {message}")
                } else {
                    message
                },
            })?;
        }
        Ok(())
    }

    /// Defaults, then `text`, then `overrides` (`key=value`). Override
    /// errors report line 0.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries = parse_lines(text)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("override `{o}` is not key=value"),
            })?;
            entries.push((0, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        cfg.apply(&entries)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn stage_layers(&self) -> Result<Vec<usize>> {
        match &self.stages {
            Some(s) => Ok(s.clone()),
            None => stage_layers(self.model.depth, 3),
        }
    }

    pub fn sparsify(&self) -> Result<SparsifyConfig> {
        let mut s = SparsifyConfig::new(self.rho, self.stage_layers()?, self.mode);
        s.gumbel.tau = self.train.tau_end;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.predictor.validate()?;
        self.train.validate()?;
        self.sparsify()?.validate(self.model.depth)?;
        if self.square == 0 || self.square > self.model.image_size {
            return Err(Error::Config(format!("square {} does not fit the image", self.square)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn train_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.model.image_size,
            channels: self.model.channels,
            classes: self.model.num_classes,
            samples: self.train_samples,
            noise: self.noise,
            square: self.square,
            seed: self.data_seed,
        }
    }

    pub fn eval_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            samples: self.eval_samples,
            seed: self.data_seed.wrapping_add(1),
            ..self.train_spec()
        }
    }

    /// Every key with its resolved value; parsing it back gives `self`.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let p = &self.predictor;
        let t = &self.train;
        let join = |v: &[String]| v.join(",");
        let nums = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let stages = match self.stage_layers() {
            Ok(s) => s.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            Err(_) => "auto".into(),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("channels", m.channels.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("rho", self.rho.to_string());
        kv("stages", stages);
        kv(
            "mode",
            match self.mode {
                Mode::Training => "training",
                Mode::Inference => "inference",
            }
            .into(),
        );
        kv("d_remap", p.d_remap.to_string());
        kv("per_head", p.toggles.per_head.to_string());
        kv("include_a", p.toggles.include_a.to_string());
        kv("include_m", p.toggles.include_m.to_string());
        kv("include_sigma", p.toggles.include_sigma.to_string());
        kv("include_mu", p.toggles.include_mu.to_string());
        kv("include_var", p.toggles.include_var.to_string());
        kv("shared_predictor", p.shared_across_stages.to_string());
        kv(
            "variance_form",
            match p.variance_form {
                VarianceForm::Squared => "squared",
                VarianceForm::StdDev => "std",
            }
            .into(),
        );
        kv("pretrain_epochs", t.pretrain_epochs.to_string());
        kv("pretrain_lr", t.pretrain_lr.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("backbone_lr", t.backbone_lr.to_string());
        kv("predictor_lr", t.predictor_lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("tau_start", t.tau_start.to_string());
        kv("tau_end", t.tau_end.to_string());
        kv("lambda_rate", t.weights.rate.to_string());
        kv("lambda_pred", t.weights.pred.to_string());
        kv("lambda_token", t.weights.token.to_string());
        kv("seed", t.seed.to_string());
        kv("train_samples", self.train_samples.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("noise", self.noise.to_string());
        kv("square", self.square.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("train_data", opt(&self.train_data));
        kv("eval_data", opt(&self.eval_data));
        kv("checkpoint", opt(&self.checkpoint));
        kv("shades", nums(&self.shades));
        kv("sample", self.sample.to_string());
        kv("variants", join(&self.variants));
        s
    }
}
