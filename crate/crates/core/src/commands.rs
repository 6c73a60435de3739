//! Subcommand implementations behind the `spot` binary. Each writes its
//! artifacts into the output directory and returns a short summary for
//! standard output.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::engine::{run, Mode, Noise, Selector, SparsifyConfig};
use crate::error::{Error, Result};
use crate::flops::{model_cost, RetentionPlan};
use crate::io::config::RunConfig;
use crate::io::{checkpoint, ppm};
use crate::predictor::{PredictorConfig, Predictors};
use crate::selection::RetentionState;
use crate::stats::{descriptor, stats_header, CrossLayerAccumulator};
use crate::train::data::{self, Dataset};
use crate::train::trainer::{
    evaluate, finetune, log_csv, pretrain, EpochLog, EvalSelector, Evaluation, Finetune, Teacher,
};
use crate::vit::{Hooks, Image, ViT};

pub struct Invocation {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Invocation {
    /// Creates the output directory and records the resolved configuration.
    pub fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("config.txt"), self.config.echo())?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn train_set(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.train_data {
        Some(p) => data::load(p, cfg.model.image_size, cfg.model.channels),
        None => data::generate(&cfg.train_spec()),
    }
}

fn eval_set(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.eval_data {
        Some(p) => data::load(p, cfg.model.image_size, cfg.model.channels),
        None => data::generate(&cfg.eval_spec()),
    }
}

fn fresh_backbone(cfg: &RunConfig) -> Result<ViT> {
    ViT::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))
}

fn fresh_predictors(cfg: &RunConfig, predictor: &PredictorConfig) -> Result<Predictors> {
    let stages = cfg.stage_layers()?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    Predictors::new(
        predictor.clone(),
        cfg.model.embed_dim,
        cfg.model.heads,
        stages,
        &mut rng,
    )
}

/// Backbone and predictors, from the configured checkpoint when one is set.
fn load_model(cfg: &RunConfig) -> Result<(ViT, Predictors)> {
    let mut vit = fresh_backbone(cfg)?;
    let mut preds = fresh_predictors(cfg, &cfg.predictor)?;
    if let Some(path) = &cfg.checkpoint {
        checkpoint::load_into(path, &mut [vit.params_mut(), preds.params_mut()])?;
    }
    Ok((vit, preds))
}

fn sample_image(cfg: &RunConfig) -> Result<Image> {
    let set = eval_set(cfg)?;
    let n = set.len();
    set.samples
        .into_iter()
        .nth(cfg.sample)
        .map(|s| s.image)
        .ok_or_else(|| Error::Config(format!("sample {} outside an evaluation set of {n}", cfg.sample)))
}

fn retention(
    vit: &ViT,
    preds: &Predictors,
    image: &Image,
    sparsify: &SparsifyConfig,
    seed: u64,
) -> Result<RetentionState> {
    let tape = Tape::new();
    let vp = vit.bind(&tape, false);
    let pp = preds.params().bind(&tape, false);
    let sel = Selector::Spot {
        predictors: preds,
        params: &pp,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (sparsify.mode == Mode::Training).then_some(Noise::Sampled(&mut rng));
    Ok(run(vit, &vp, &sel, image, sparsify, noise)?.state)
}

fn summary(label: &str, e: &Evaluation, dense_total: u64) -> String {
    let mut s = format!(
        "{label:<10} accuracy {:.4}  cost {:.6} GMAC",
        e.accuracy,
        e.flops.total as f64 / 1e9
    );
    if e.flops.total != dense_total {
        let _ = write!(
            s,
            "  reduction {:.2}%",
            100.0 * (1.0 - e.flops.total as f64 / dense_total as f64)
        );
    }
    if !e.kept.is_empty() {
        let kept: Vec<String> = e.kept.iter().map(|k| format!("{k:.4}")).collect();
        let _ = write!(s, "  kept {}", kept.join(" "));
    }
    s.push('\n');
    s
}

pub fn train(inv: &Invocation) -> Result<String> {
    inv.prepare()?;
    let cfg = &inv.config;
    let train = train_set(cfg)?;
    let eval = eval_set(cfg)?;
    let mut vit = fresh_backbone(cfg)?;
    let mut logs: Vec<EpochLog> = Vec::new();
    match &cfg.checkpoint {
        Some(path) => checkpoint::load_into(path, &mut [vit.params_mut()])?,
        None => logs.extend(pretrain(&mut vit, &train, &cfg.train)?),
    }
    checkpoint::save(&inv.path("teacher.ckpt"), &[vit.params()])?;
    let teacher = Teacher::new(&vit);
    let mut preds = fresh_predictors(cfg, &cfg.predictor)?;
    let sparsify = cfg.sparsify()?;
    let rescue = inv.path("rescue.ckpt");
    let result = finetune(
        Finetune {
            student: &mut vit,
            predictors: &mut preds,
            teacher: &teacher,
            sparsify: &sparsify,
            train: &cfg.train,
            rescue: Some(&rescue),
        },
        &train,
    );
    let fine = match result {
        Ok(l) => l,
        Err(e) => {
            fs::write(inv.path("train_log.csv"), log_csv(&logs))?;
            return Err(e);
        }
    };
    logs.extend(fine);
    fs::write(inv.path("train_log.csv"), log_csv(&logs))?;
    checkpoint::save(&inv.path("model.ckpt"), &[vit.params(), preds.params()])?;

    let dense = evaluate(teacher.model(), EvalSelector::Dense, &eval, &sparsify)?;
    let spot = evaluate(&vit, EvalSelector::Spot(&preds), &eval, &sparsify)?;
    let mut report = summary("teacher", &dense, dense.flops.total);
    report.push_str(&summary("spot", &spot, dense.flops.total));
    let targets: Vec<String> = (1..=sparsify.stages())
        .map(|k| format!("{:.4}", sparsify.rho.powi(k as i32)))
        .collect();
    let _ = writeln!(report, "target kept {}", targets.join(" "));
    fs::write(inv.path("eval.txt"), &report)?;
    Ok(report)
}

pub fn eval(inv: &Invocation) -> Result<String> {
    inv.prepare()?;
    let cfg = &inv.config;
    let eval = eval_set(cfg)?;
    let (vit, preds) = load_model(cfg)?;
    let mut sparsify = cfg.sparsify()?;
    sparsify.mode = Mode::Inference;
    let dense = evaluate(&vit, EvalSelector::Dense, &eval, &sparsify)?;
    let spot = evaluate(&vit, EvalSelector::Spot(&preds), &eval, &sparsify)?;
    let heur = evaluate(&vit, EvalSelector::Heuristic, &eval, &sparsify)?;
    let mut report = summary("dense", &dense, dense.flops.total);
    report.push_str(&summary("spot", &spot, dense.flops.total));
    report.push_str(&summary("heuristic", &heur, dense.flops.total));
    fs::write(inv.path("eval.txt"), &report)?;
    fs::write(inv.path("flops.txt"), spot.flops.to_text())?;
    Ok(report)
}

/// Dense and sparsified cost reports, as text or CSV.
pub fn flops(inv: &Invocation, csv: bool) -> Result<String> {
    inv.prepare()?;
    let cfg = &inv.config;
    let dense = model_cost(&cfg.model, &RetentionPlan::dense(&cfg.model))?;
    let plan = RetentionPlan::sparse(&cfg.model, cfg.rho, &cfg.stage_layers()?, Some(&cfg.predictor))?;
    let sparse = model_cost(&cfg.model, &plan)?;
    let mut text = String::new();
    let _ = writeln!(text, "dense");
    text.push_str(&dense.to_text());
    let _ = writeln!(text, "\nsparse (rho {}, stages {:?})", cfg.rho, cfg.stage_layers()?);
    text.push_str(&sparse.to_text());
    let _ = writeln!(
        text,
        "\nreduction {:.2}%  predictor overhead {:.4} G",
        100.0 * (1.0 - sparse.total as f64 / dense.total as f64),
        sparse.predictor_total() as f64 / 1e9
    );
    let mut table = String::from("variant,item,tokens,attention,mlp,cost\n");
    for (name, r) in [("dense", &dense), ("sparse", &sparse)] {
        for line in r.to_csv().lines().skip(1) {
            let _ = writeln!(table, "{name},{line}");
        }
    }
    fs::write(inv.path("flops.txt"), &text)?;
    fs::write(inv.path("flops.csv"), &table)?;
    Ok(if csv { table } else { text })
}

pub fn visualize(inv: &Invocation) -> Result<String> {
    inv.prepare()?;
    let cfg = &inv.config;
    let image = sample_image(cfg)?;
    let (vit, preds) = load_model(cfg)?;
    let state = retention(&vit, &preds, &image, &cfg.sparsify()?, cfg.train.seed)?;
    fs::write(inv.path("input.ppm"), ppm::encode(&image)?)?;
    fs::write(
        inv.path("overlay.ppm"),
        ppm::overlay(&image, cfg.model.patch_size, &state, &cfg.shades)?,
    )?;
    let counts: Vec<String> = state.kept_counts.iter().map(usize::to_string).collect();
    Ok(format!(
        "wrote {} (patches kept per stage: {})\n",
        inv.path("overlay.ppm").display(),
        counts.join(" ")
    ))
}

/// Per-token descriptors of the dense forward pass as seen by each stage:
/// the previous layer's maps and the statistics of every earlier layer.
pub fn stats_dump(inv: &Invocation) -> Result<String> {
    inv.prepare()?;
    let cfg = &inv.config;
    let image = sample_image(cfg)?;
    let (vit, _) = load_model(cfg)?;
    let stages = cfg.stage_layers()?;
    let form = cfg.predictor.variance_form;
    let tape = Tape::new();
    let p = vit.bind(&tape, false);
    let out = vit.forward(&p, &image, &Hooks::default())?;
    let mut csv = format!("stage,layer,{}\n", stats_header(cfg.model.heads).join(","));
    let mut acc = CrossLayerAccumulator::new();
    for (k, &stage) in stages.iter().enumerate() {
        if k == 0 {
            for maps in &out.maps[..stage - 2] {
                acc.accumulate(maps)?;
            }
        } else {
            for maps in &out.maps[stages[k - 1] - 1..stage - 2] {
                acc.accumulate(maps)?;
            }
        }
        let maps = &out.maps[stage - 2];
        acc.accumulate(maps)?;
        let heads = maps.len();
        let mut columns = Vec::with_capacity(3 * heads);
        for m in maps {
            columns.push(descriptor(m, form)?.value());
        }
        for h in 0..heads {
            columns.push(descriptor(&acc.mean(h), form)?.value());
        }
        for h in 0..heads {
            columns.push(descriptor(&acc.variance(h), form)?.value());
        }
        for t in 0..columns[0].rows() {
            let _ = write!(csv, "{},{},{}", k + 1, stage, t + 1);
            for c in &columns {
                for v in c.row(t) {
                    let _ = write!(csv, ",{v}");
                }
            }
            csv.push('\n');
        }
    }
    fs::write(inv.path("stats.csv"), &csv)?;
    Ok(format!(
        "wrote {} ({} stages, {} tokens)\n",
        inv.path("stats.csv").display(),
        stages.len(),
        cfg.model.num_patches()
    ))
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean Jaccard overlap of the patches kept by the learned predictors and
/// by the attention heuristic, per stage.
pub fn compare_baseline(inv: &Invocation) -> Result<String> {
    inv.prepare()?;
    let cfg = &inv.config;
    let eval = eval_set(cfg)?;
    let (vit, preds) = load_model(cfg)?;
    let mut sparsify = cfg.sparsify()?;
    sparsify.mode = Mode::Inference;
    let stages = sparsify.stage_layers.clone();
    let mut sums = vec![0.0; stages.len()];
    for s in &eval.samples {
        let tape = Tape::new();
        let vp = vit.bind(&tape, false);
        let pp = preds.params().bind(&tape, false);
        let sel = Selector::Spot {
            predictors: &preds,
            params: &pp,
        };
        let spot = run(&vit, &vp, &sel, &s.image, &sparsify, None)?.state;
        let heur = run(&vit, &vp, &Selector::Heuristic, &s.image, &sparsify, None)?.state;
        for (k, sum) in sums.iter_mut().enumerate() {
            *sum += jaccard(&spot.masks[k].positions()[1..], &heur.masks[k].positions()[1..]);
        }
    }
    let n = eval.len().max(1) as f64;
    let mut csv = String::from("stage,layer,jaccard\n");
    for (k, sum) in sums.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{}", k + 1, stages[k], sum / n);
    }
    fs::write(inv.path("compare.csv"), &csv)?;
    let mut text = String::new();
    for (k, sum) in sums.iter().enumerate() {
        let _ = writeln!(
            text,
            "stage {} (layer {}): mean Jaccard {:.4}",
            k + 1,
            stages[k],
            sum / n
        );
    }
    Ok(text)
}

/// Predictor configuration for a named ablation variant.
pub fn variant_config(base: &PredictorConfig, name: &str) -> Result<PredictorConfig> {
    let mut p = base.clone();
    match name {
        "full" => {}
        "no_mu" => p.toggles.include_mu = false,
        "no_var" => p.toggles.include_var = false,
        "no_cross" => {
            p.toggles.include_m = false;
            p.toggles.include_sigma = false;
        }
        "no_stats" => {
            p.toggles.include_a = false;
            p.toggles.include_m = false;
            p.toggles.include_sigma = false;
        }
        "head_avg" => p.toggles.per_head = false,
        "shared" => p.shared_across_stages = true,
        "std" => p.variance_form = crate::stats::VarianceForm::StdDev,
        other => match other.strip_prefix("remap_").map(str::parse::<usize>) {
            Some(Ok(d)) => p.d_remap = d,
            _ => return Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        },
    }
    p.validate()?;
    Ok(p)
}

/// Fine-tunes one predictor variant per row from a shared dense backbone
/// and tabulates accuracy against cost.
pub fn ablate(inv: &Invocation) -> Result<String> {
    let cfg = &inv.config;
    if cfg.variants.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    let variants: Vec<(String, PredictorConfig)> = cfg
        .variants
        .iter()
        .map(|v| Ok((v.clone(), variant_config(&cfg.predictor, v)?)))
        .collect::<Result<_>>()?;
    inv.prepare()?;
    let train = train_set(cfg)?;
    let eval = eval_set(cfg)?;
    let mut base = fresh_backbone(cfg)?;
    match &cfg.checkpoint {
        Some(path) => checkpoint::load_into(path, &mut [base.params_mut()])?,
        None => {
            pretrain(&mut base, &train, &cfg.train)?;
        }
    }
    let teacher = Teacher::new(&base);
    let sparsify = cfg.sparsify()?;
    let mut table = format!(
        "{:<12} {:>5} {:>16} {:>12} {:>9}\n",
        "variant", "E", "predictor_mac", "total_gmac", "accuracy"
    );
    for (name, pcfg) in &variants {
        let mut student = base.clone();
        let mut preds = fresh_predictors(cfg, pcfg)?;
        finetune(
            Finetune {
                student: &mut student,
                predictors: &mut preds,
                teacher: &teacher,
                sparsify: &sparsify,
                train: &cfg.train,
                rescue: None,
            },
            &train,
        )?;
        let e = evaluate(&student, EvalSelector::Spot(&preds), &eval, &sparsify)?;
        let _ = writeln!(
            table,
            "{:<12} {:>5} {:>16} {:>12.6} {:>9.4}",
            name,
            pcfg.feature_width(cfg.model.heads),
            e.flops.predictor_total(),
            e.flops.total as f64 / 1e9,
            e.accuracy
        );
    }
    fs::write(inv.path("ablate.txt"), &table)?;
    Ok(table)
}
