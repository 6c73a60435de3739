//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails. Extra command-line words filter
//! criteria by substring, e.g. `cargo test --test acceptance -- AC4`.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spot_core::autograd::{Tape, Var};
use spot_core::baseline::{heuristic_score, variance_reduction_trial};
use spot_core::commands::{self, Invocation};
use spot_core::engine::{run, target_counts, Mode, Noise, Selector, SparsifyConfig};
use spot_core::flops::{model_cost, RetentionPlan};
use spot_core::io::config::RunConfig;
use spot_core::losses::{pred_similarity, rate_loss, task_loss, token_similarity, total, LossTerms, LossWeights};
use spot_core::predictor::{gumbel_mask, sample_gumbel, GumbelSettings, PredictorConfig, Predictors};
use spot_core::selection::{topk_select, RetentionMask};
use spot_core::stats::{descriptor, CrossLayerAccumulator, VarianceForm};
use spot_core::tensor::Tensor;
use spot_core::train::data::generate;
use spot_core::train::trainer::{evaluate, finetune, pretrain, EvalSelector, Finetune, Phase, Teacher, TeacherOutput};
use spot_core::vit::{Hooks, Image, ViT, ViTConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("AC1", "FLOP calibration", ac1_flop_calibration),
        ("AC2", "statistics oracle suite", ac2_statistics),
        ("AC3", "gradient suite", ac3_gradients),
        ("AC4", "mask invariants", ac4_mask_invariants),
        ("AC5", "Gumbel-Softmax statistics", ac5_gumbel),
        ("AC6", "variance reduction", ac6_variance_reduction),
        ("AC7", "desk-scale training smoke test", ac7_desk_training),
        ("AC8", "baseline comparison", ac8_baseline),
        ("AC9", "reproducibility", ac9_reproducibility),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let label = format!("{id} {name}");
        if !filters.is_empty() && !filters.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{label}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("{label}: FAIL ({secs:.1}s) {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn within_rel(x: f64, target: f64, tol: f64) -> bool {
    ((x - target) / target).abs() <= tol
}

fn ac1_flop_calibration() -> Outcome {
    let start = Instant::now();
    let g = |v: u64| v as f64 / 1e9;
    let s = ViTConfig::deit_small();
    let t = ViTConfig::deit_tiny();
    let full = |d: usize| PredictorConfig {
        d_remap: d,
        ..PredictorConfig::default()
    };
    let mut reduced = full(384);
    reduced.toggles.include_m = false;
    reduced.toggles.include_sigma = false;

    let s_dense = g(ok(model_cost(&s, &RetentionPlan::dense(&s)))?.total);
    let s_sparse_report = ok(model_cost(
        &s,
        &ok(RetentionPlan::sparse(&s, 0.7, &[4, 7, 10], Some(&full(384))))?,
    ))?;
    let s_sparse = g(s_sparse_report.total);
    let s_pred = g(s_sparse_report.predictor_total());
    let s_reduced = g(ok(model_cost(
        &s,
        &ok(RetentionPlan::sparse(&s, 0.7, &[4, 7, 10], Some(&reduced)))?,
    ))?
    .predictor_total());
    let t_dense = g(ok(model_cost(&t, &RetentionPlan::dense(&t)))?.total);
    let t_sparse = g(ok(model_cost(
        &t,
        &ok(RetentionPlan::sparse(&t, 0.7, &[4, 7, 10], Some(&full(192))))?,
    ))?
    .total);

    ensure!(within_rel(s_dense, 4.6, 0.05), "DeiT-S dense {s_dense:.4} G");
    ensure!(within_rel(s_sparse, 3.0, 0.07), "DeiT-S sparse {s_sparse:.4} G");
    ensure!(within_rel(t_dense, 1.3, 0.05), "DeiT-T dense {t_dense:.4} G");
    ensure!((t_sparse - 0.8).abs() <= 0.1, "DeiT-T sparse {t_sparse:.4} G");
    ensure!(within_rel(s_pred, 0.129, 0.15), "DeiT-S predictor {s_pred:.4} G");
    ensure!(within_rel(s_reduced, 0.111, 0.15), "reduced predictor {s_reduced:.4} G");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "S dense {s_dense:.3} sparse {s_sparse:.3} pred {s_pred:.4} reduced {s_reduced:.4}; T dense {t_dense:.3} sparse {t_sparse:.3}"
    ))
}

fn random_stochastic(n: usize, rng: &mut impl Rng) -> Tensor {
    let mut data: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() + 1e-3).collect();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::matrix(n, n, data).unwrap()
}

/// Class interactions and population row/column moments, written out
/// index by index.
fn literal_descriptor(a: &Tensor) -> Vec<[f64; 6]> {
    let n = a.rows() - 1;
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let row: Vec<f64> = (1..=n).map(|j| a.at(i, j)).collect();
        let col: Vec<f64> = (1..=n).map(|j| a.at(j, i)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let (mr, mc) = (mean(&row), mean(&col));
        let vr = row.iter().map(|x| (x - mr) * (x - mr)).sum::<f64>() / n as f64;
        let vc = col.iter().map(|x| (x - mc) * (x - mc)).sum::<f64>() / n as f64;
        out.push([a.at(0, i), a.at(i, 0), mr, mc, vr, vc]);
    }
    out
}

fn ac2_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=32);
        let a = random_stochastic(n + 1, &mut rng);
        let tape = Tape::new();
        let d = ok(descriptor(&tape.constant(a.clone()), VarianceForm::Squared))?.value();
        ensure!(d.shape() == [n, 6], "descriptor shape {:?} for N = {n}", d.shape());
        for (t, row) in literal_descriptor(&a).iter().enumerate() {
            for c in 0..6 {
                worst = worst.max((d.at(t, c) - row[c]).abs());
            }
        }
    }
    ensure!(worst <= 1e-12, "descriptor deviates by {worst:e}");

    let mut worst_acc: f64 = 0.0;
    for _ in 0..50 {
        let layers = rng.random_range(1..=16);
        let heads = rng.random_range(1..=4);
        let n = rng.random_range(2..=20);
        let stack: Vec<Vec<Tensor>> = (0..layers)
            .map(|_| (0..heads).map(|_| random_stochastic(n, &mut rng)).collect())
            .collect();
        let tape = Tape::new();
        let mut acc = CrossLayerAccumulator::new();
        for l in &stack {
            let vars: Vec<Var> = l.iter().map(|m| tape.constant(m.clone())).collect();
            ok(acc.accumulate(&vars))?;
        }
        for h in 0..heads {
            let mean = acc.mean(h).value();
            let var = acc.variance(h).value();
            for i in 0..n * n {
                let xs: Vec<f64> = stack.iter().map(|l| l[h].data()[i]).collect();
                let m = xs.iter().sum::<f64>() / layers as f64;
                let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / layers as f64;
                worst_acc = worst_acc.max((mean.data()[i] - m).abs()).max((var.data()[i] - v).abs());
            }
            if layers == 1 {
                let d = ok(descriptor(&acc.variance(h), VarianceForm::Squared))?.value();
                ensure!(
                    d.data().iter().all(|&x| x == 0.0),
                    "single-layer variance descriptor is not zero"
                );
            }
        }
    }
    ensure!(
        worst_acc <= 1e-12,
        "accumulator deviates from two-pass by {worst_acc:e}"
    );
    Ok(format!(
        "max descriptor error {worst:.1e}, max accumulator error {worst_acc:.1e}"
    ))
}

/// Relative error with a floor so gradients near zero are compared on an
/// absolute scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

type OpFn = for<'t> fn(&[Var<'t>]) -> spot_core::error::Result<Var<'t>>;

/// Central differences (h = 1e-5) of `Σ w ⊙ f(inputs)` against the tape.
fn check_op(f: OpFn, inputs: &[Tensor]) -> Result<f64, String> {
    let h = 1e-5;
    let weights = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = ok(f(&vars))?.shape();
        random_tensor(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5))
    };
    let eval = |inputs: &[Tensor]| -> Result<f64, String> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = ok(f(&vars))?;
        Ok(ok(out.mul(&tape.constant(weights.clone())))?.sum().item())
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = ok(f(&vars))?;
    let loss = ok(out.mul(&tape.constant(weights.clone())))?.sum();
    ok(tape.backward(loss))?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let g = v.grad().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], fd));
        }
    }
    Ok(worst)
}

fn op_suite() -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut r = |shape: &[usize]| random_tensor(shape, -1.0, 1.0, &mut rng);
    let positive = |t: Tensor| t.map(|x| x.abs() + 0.5);
    let mask = Tensor::vector(vec![1.0, 0.35, 0.8, 0.6]);
    vec![
        ("matmul", |v| v[0].matmul(&v[1]), vec![r(&[3, 4]), r(&[4, 2])]),
        ("transpose", |v| v[0].transpose(), vec![r(&[3, 2])]),
        ("add", |v| v[0].add(&v[1]), vec![r(&[2, 3]), r(&[2, 3])]),
        ("sub", |v| v[0].sub(&v[1]), vec![r(&[2, 3]), r(&[2, 3])]),
        ("mul", |v| v[0].mul(&v[1]), vec![r(&[2, 3]), r(&[2, 3])]),
        ("square", |v| Ok(v[0].square()), vec![r(&[2, 3])]),
        ("add_row", |v| v[0].add_row(&v[1]), vec![r(&[3, 2]), r(&[2])]),
        ("add_col", |v| v[0].add_col(&v[1]), vec![r(&[3, 2]), r(&[3])]),
        ("mul_col", |v| v[0].mul_col(&v[1]), vec![r(&[3, 2]), r(&[3])]),
        ("scale", |v| Ok(v[0].scale(-1.7)), vec![r(&[4])]),
        ("neg", |v| Ok(v[0].neg()), vec![r(&[4])]),
        ("add_scalar", |v| Ok(v[0].add_scalar(0.3)), vec![r(&[4])]),
        ("exp", |v| Ok(v[0].exp()), vec![r(&[2, 3])]),
        ("log_clamp", |v| Ok(v[0].log_clamp(1e-12)), vec![positive(r(&[5]))]),
        ("sqrt", |v| Ok(v[0].sqrt()), vec![positive(r(&[5]))]),
        ("recip", |v| Ok(v[0].recip()), vec![positive(r(&[5]))]),
        ("gelu", |v| Ok(v[0].gelu()), vec![r(&[2, 4]).map(|x| 3.0 * x)]),
        ("softmax", |v| Ok(v[0].softmax()), vec![r(&[3, 4])]),
        ("log_softmax", |v| Ok(v[0].log_softmax()), vec![r(&[3, 4])]),
        ("masked_softmax", |v| v[0].masked_softmax(&v[1]), vec![r(&[3, 4]), mask]),
        (
            "layer_norm",
            |v| v[0].layer_norm(&v[1], &v[2], 1e-6),
            vec![r(&[3, 5]), r(&[5]), r(&[5])],
        ),
        ("sum", |v| Ok(v[0].sum()), vec![r(&[2, 3])]),
        ("mean_rows", |v| Ok(v[0].mean_rows()), vec![r(&[3, 2])]),
        ("mean_cols", |v| Ok(v[0].mean_cols()), vec![r(&[3, 2])]),
        ("gather", |v| v[0].gather(&[0, 2], &[1, 0]), vec![r(&[3, 3])]),
        ("slice", |v| v[0].slice(1..3, 0..2), vec![r(&[3, 3])]),
        ("select_rows", |v| v[0].select_rows(&[2, 0, 2]), vec![r(&[3, 2])]),
        ("index", |v| v[0].index(&[3, 1]), vec![r(&[4])]),
        ("scatter", |v| v[0].scatter(&[0, 3], 5), vec![r(&[2])]),
        (
            "concat_cols",
            |v| Var::concat_cols(&[v[0], v[1]]),
            vec![r(&[2, 2]), r(&[2, 1])],
        ),
        (
            "concat_rows",
            |v| Var::concat_rows(&[v[0], v[1]]),
            vec![r(&[1, 3]), r(&[2, 3])],
        ),
        ("reshape", |v| v[0].reshape(vec![3, 2]), vec![r(&[2, 3])]),
        ("repeat_rows", |v| v[0].repeat_rows(3), vec![r(&[3])]),
        // the backward pass of a straight-through value is that of the soft input
        (
            "straight_through",
            |v| v[0].straight_through(v[0].value().as_ref().clone()),
            vec![r(&[4])],
        ),
    ]
}

fn tiny_config(depth: usize) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        depth,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
    }
}

fn random_image(cfg: &ViTConfig, rng: &mut impl Rng) -> Image {
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    Image::new(cfg.image_size, cfg.channels, (0..n).map(|_| rng.random()).collect()).unwrap()
}

/// Composed objective with every term weighted, evaluated on one tape.
fn composed_loss<'t>(
    vit: &ViT,
    vp: &spot_core::params::Bound<'t>,
    preds: &Predictors,
    pp: &spot_core::params::Bound<'t>,
    image: &Image,
    teacher: &TeacherOutput,
    sp: &SparsifyConfig,
    noise: &[Tensor],
) -> Result<Var<'t>, String> {
    let sel = Selector::Spot {
        predictors: preds,
        params: pp,
    };
    let out = ok(run(vit, vp, &sel, image, sp, Some(Noise::Fixed(noise))))?;
    let k = out.rho_hat.len();
    let row = ok(ok(Var::concat_rows(&out.rho_hat))?.reshape(vec![1, k]))?;
    let targets: Vec<f64> = (1..=k).map(|i| sp.rho.powi(i as i32)).collect();
    let student_tokens = ok(out.retained_patch_tokens())?;
    let rows: Vec<usize> = out.kept[1..].to_vec();
    let d = teacher.tokens.cols();
    let t_rows: Vec<f64> = rows.iter().flat_map(|&p| teacher.tokens.row(p).to_vec()).collect();
    let terms = LossTerms {
        cls: ok(task_loss(&out.logits, &[1]))?,
        rate: Some(ok(rate_loss(&row, &targets))?),
        pred: Some(ok(pred_similarity(&teacher.probs, &out.logits))?),
        token: Some(ok(token_similarity(
            &[ok(Tensor::matrix(rows.len(), d, t_rows))?],
            &[student_tokens],
        ))?),
    };
    let w = LossWeights {
        rate: 2.0,
        pred: 0.5,
        token: 1.0,
    };
    ok(total(&terms, &w))
}

fn ac3_gradients() -> Outcome {
    let mut worst_op: f64 = 0.0;
    let mut names = 0;
    for (name, f, inputs) in op_suite() {
        let e = check_op(f, &inputs)?;
        ensure!(e < 1e-5, "{name}: relative error {e:e}");
        worst_op = worst_op.max(e);
        names += 1;
    }

    // end to end through backbone, statistics, predictors and relaxed masks
    let cfg = tiny_config(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vit = ok(ViT::new(cfg.clone(), &mut rng))?;
    let teacher = Teacher::new(&ok(ViT::new(cfg.clone(), &mut rng))?);
    let preds = ok(Predictors::new(
        PredictorConfig {
            d_remap: 8,
            ..PredictorConfig::default()
        },
        16,
        2,
        2,
        &mut rng,
    ))?;
    let image = random_image(&cfg, &mut rng);
    let t_out = ok(teacher.outputs(&image))?;
    let mut sp = SparsifyConfig::new(0.6, vec![2, 3], Mode::Training);
    sp.gumbel = GumbelSettings { tau: 0.7, hard: false };
    let noise: Vec<Tensor> = (0..2).map(|_| sample_gumbel(cfg.num_patches(), &mut rng)).collect();

    let tape = Tape::new();
    let vp = vit.bind(&tape, true);
    let pp = preds.params().bind(&tape, true);
    let loss = composed_loss(&vit, &vp, &preds, &pp, &image, &t_out, &sp, &noise)?;
    ok(tape.backward(loss))?;
    let (gv, gp) = (vp.grads(), pp.grads());

    let value = |vit: &ViT, preds: &Predictors| -> Result<f64, String> {
        let tape = Tape::new();
        let vp = vit.bind(&tape, false);
        let pp = preds.params().bind(&tape, false);
        Ok(composed_loss(vit, &vp, preds, &pp, &image, &t_out, &sp, &noise)?.item())
    };
    let h = 1e-5;
    let mut worst_e2e: f64 = 0.0;
    let mut checked = 0;
    for which in 0..2 {
        let (store, grads) = if which == 0 {
            (vit.params(), &gv)
        } else {
            (preds.params(), &gp)
        };
        for (slot, id) in store.ids().enumerate() {
            let Some(g) = &grads[slot] else { continue };
            let big = (0..g.numel()).fold(0, |b, i| if g.data()[i].abs() > g.data()[b].abs() { i } else { b });
            let random = rng.random_range(0..g.numel());
            for j in [big, random] {
                let shifted = |delta: f64| -> Result<f64, String> {
                    let (mut v2, mut p2) = (vit.clone(), preds.clone());
                    if which == 0 {
                        v2.params_mut().get_mut(id).data_mut()[j] += delta;
                    } else {
                        p2.params_mut().get_mut(id).data_mut()[j] += delta;
                    }
                    value(&v2, &p2)
                };
                let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
                let e = rel_err(g.data()[j], fd);
                ensure!(
                    e < 1e-4,
                    "{} [{j}]: analytic {} vs numeric {fd} (relative {e:e})",
                    store.name(id),
                    g.data()[j]
                );
                worst_e2e = worst_e2e.max(e);
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{names} ops max relative error {worst_op:.1e}; {checked} end-to-end coordinates max {worst_e2e:.1e}"
    ))
}

fn ac4_mask_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut neutral_runs = 0;
    let mut worst_equiv: f64 = 0.0;
    for trial in 0..1000 {
        let depth = rng.random_range(4..=6);
        let cfg = tiny_config(depth);
        let n0 = cfg.num_patches();
        let vit = ok(ViT::new(cfg.clone(), &mut rng))?;
        let k = rng.random_range(0..=3usize);
        let mut stages: Vec<usize> = (2..=depth).collect();
        while stages.len() > k {
            let drop = rng.random_range(0..stages.len());
            stages.remove(drop);
        }
        let rho = if trial % 10 == 0 {
            1.0
        } else {
            rng.random_range(0.2..1.0)
        };
        let pcfg = PredictorConfig {
            d_remap: [0, 4, 8][rng.random_range(0..3)],
            ..PredictorConfig::default()
        };
        let preds = ok(Predictors::new(pcfg, 16, 2, k, &mut rng))?;
        let image = random_image(&cfg, &mut rng);
        let tape = Tape::new();
        let vp = vit.bind(&tape, false);
        let pp = preds.params().bind(&tape, false);
        let sel = Selector::Spot {
            predictors: &preds,
            params: &pp,
        };

        let sp = SparsifyConfig::new(rho, stages.clone(), Mode::Inference);
        let out = ok(run(&vit, &vp, &sel, &image, &sp, None))?;
        let masks = &out.state.masks;
        ensure!(masks.len() == k, "trial {trial}: {} masks for {k} stages", masks.len());
        let targets = target_counts(n0, rho, k);
        for (i, m) in masks.iter().enumerate() {
            ensure!(m.get(0), "trial {trial}: class token dropped at stage {}", i + 1);
            ensure!(
                m.kept_patches() == targets[i],
                "trial {trial}: stage {} kept {} of target {}",
                i + 1,
                m.kept_patches(),
                targets[i]
            );
            for later in &masks[i + 1..] {
                ensure!(
                    (0..=n0).all(|p| !later.get(p) || m.get(p)),
                    "trial {trial}: hierarchy violated after stage {}",
                    i + 1
                );
            }
        }

        let dense = ok(vit.forward(&vp, &image, &Hooks::default()))?.logits.value();
        if rho == 1.0 || k == 0 {
            ensure!(
                out.logits.value().data() == dense.data(),
                "trial {trial}: full retention changed the logits"
            );
            neutral_runs += 1;
        }
        let hooks = |pruned: bool| Hooks {
            masks: stages
                .iter()
                .copied()
                .zip(masks.iter().cloned())
                .collect::<BTreeMap<_, _>>(),
            pruned,
        };
        let masked = ok(vit.forward(&vp, &image, &hooks(false)))?.logits.value();
        let pruned = ok(vit.forward(&vp, &image, &hooks(true)))?.logits.value();
        worst_equiv = worst_equiv
            .max(masked.max_abs_diff(&pruned))
            .max(masked.max_abs_diff(&out.logits.value()));

        // training mode: sampled masks obey the same structure
        let mut train_sp = SparsifyConfig::new(rho, stages.clone(), Mode::Training);
        train_sp.gumbel.tau = rng.random_range(0.1..2.0);
        let t_out = ok(run(&vit, &vp, &sel, &image, &train_sp, Some(Noise::Sampled(&mut rng))))?;
        for (i, m) in t_out.state.masks.iter().enumerate() {
            ensure!(
                m.get(0) && m.kept_patches() >= 1,
                "trial {trial}: training stage {} invalid",
                i + 1
            );
            if let Some(next) = t_out.state.masks.get(i + 1) {
                ensure!(
                    (0..=n0).all(|p| !next.get(p) || m.get(p)),
                    "trial {trial}: training hierarchy"
                );
            }
        }
    }
    ensure!(
        worst_equiv <= 1e-8,
        "masked and pruned forwards differ by {worst_equiv:e}"
    );
    Ok(format!(
        "1000 runs, {neutral_runs} neutral, max masked/pruned gap {worst_equiv:.1e}"
    ))
}

fn ac5_gumbel() -> Outcome {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let tape = Tape::new();
    let sym = tape.constant(Tensor::zeros(&[n, 2]));
    let s = ok(gumbel_mask(
        &sym,
        &sample_gumbel(n, &mut rng),
        GumbelSettings { tau: 1.0, hard: true },
    ))?;
    let rate = s.keep.iter().filter(|&&b| b).count() as f64 / n as f64;
    let sigma = (0.25 / n as f64).sqrt();
    ensure!((rate - 0.5).abs() <= 3.0 * sigma, "symmetric keep rate {rate}");

    let gap = 5.0;
    let logits: Vec<f64> = (0..n)
        .flat_map(|i| if i % 2 == 0 { [gap, 0.0] } else { [0.0, gap] })
        .collect();
    let lv = tape.constant(ok(Tensor::matrix(n, 2, logits))?);
    let s = ok(gumbel_mask(
        &lv,
        &sample_gumbel(n, &mut rng),
        GumbelSettings { tau: 0.1, hard: true },
    ))?;
    let agree = s.keep.iter().enumerate().filter(|(i, &k)| k == (i % 2 == 0)).count() as f64 / n as f64;
    ensure!(agree >= 0.99, "argmax agreement {agree}");
    Ok(format!(
        "keep rate {rate:.4} (3σ = {:.4}), argmax agreement {agree:.4}",
        3.0 * sigma
    ))
}

fn ac6_variance_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let sigma = 1.0;
    let mut parts = Vec::new();
    for layers in [1, 4, 12] {
        let v = ok(variance_reduction_trial(sigma, layers, 100_000, &mut rng))?;
        let expected = sigma * sigma / layers as f64;
        ensure!(
            within_rel(v, expected, 0.15),
            "L = {layers}: variance {v} vs {expected}"
        );
        parts.push(format!("L={layers} {v:.4}"));
    }
    Ok(parts.join(", "))
}

fn ac7_desk_training() -> Outcome {
    let budget = Duration::from_secs(15 * 60);
    let start = Instant::now();
    let cfg = RunConfig::default();
    let train = ok(generate(&cfg.train_spec()))?;
    let eval = ok(generate(&cfg.eval_spec()))?;
    let mut vit = ok(ViT::new(
        cfg.model.clone(),
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    ))?;
    ok(pretrain(&mut vit, &train, &cfg.train))?;
    let teacher = Teacher::new(&vit);
    let sp = ok(cfg.sparsify())?;
    let mut preds = ok(Predictors::new(
        cfg.predictor.clone(),
        cfg.model.embed_dim,
        cfg.model.heads,
        sp.stages(),
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed + 1),
    ))?;
    let logs = ok(finetune(
        Finetune {
            student: &mut vit,
            predictors: &mut preds,
            teacher: &teacher,
            sparsify: &sp,
            train: &cfg.train,
            rescue: None,
        },
        &train,
    ))?;
    let dense = ok(evaluate(teacher.model(), EvalSelector::Dense, &eval, &sp))?;
    let spot = ok(evaluate(&vit, EvalSelector::Spot(&preds), &eval, &sp))?;
    let last = logs
        .iter()
        .rev()
        .find(|l| l.phase == Phase::Finetune)
        .ok_or("no fine-tuning epochs")?;
    let reduction = 1.0 - spot.flops.total as f64 / dense.flops.total as f64;
    let elapsed = start.elapsed();

    ensure!(
        dense.accuracy - spot.accuracy <= 0.02,
        "accuracy {:.4} vs teacher {:.4}",
        spot.accuracy,
        dense.accuracy
    );
    ensure!(reduction >= 0.30, "cost reduction {:.2}%", 100.0 * reduction);
    for (k, r) in last.rho_hat.iter().enumerate() {
        let target = sp.rho.powi(k as i32 + 1);
        ensure!(
            (r - target).abs() <= 0.05,
            "stage {} mean kept rate {r:.4} vs {target:.4}",
            k + 1
        );
    }
    ensure!(elapsed <= budget, "took {elapsed:?}");
    let rates: Vec<String> = last.rho_hat.iter().map(|r| format!("{r:.3}")).collect();
    Ok(format!(
        "teacher {:.4}, spot {:.4}, reduction {:.1}%, kept rates [{}]",
        dense.accuracy,
        spot.accuracy,
        100.0 * reduction,
        rates.join(", ")
    ))
}

fn ac8_baseline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (layers, heads, n) = (12, 6, 10);
    let stack: Vec<Vec<Tensor>> = (0..layers)
        .map(|_| (0..heads).map(|_| random_stochastic(n + 1, &mut rng)).collect())
        .collect();
    let scores = ok(heuristic_score(&stack))?;
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let mut s = 0.0;
        for l in &stack {
            for m in l {
                s += m.at(0, t + 1);
            }
        }
        worst = worst.max((scores[t] - s / (layers * heads) as f64).abs());
    }
    ensure!(worst <= 1e-12, "heuristic score deviates by {worst:e}");

    // the engine's heuristic masks are top-k selections of these scores
    let cfg = tiny_config(6);
    let n0 = cfg.num_patches();
    let mut runs = 0;
    for _ in 0..50 {
        let vit = ok(ViT::new(cfg.clone(), &mut rng))?;
        let image = random_image(&cfg, &mut rng);
        let stages = vec![2, 4, 5];
        let rho = rng.random_range(0.3..0.95);
        let sp = SparsifyConfig::new(rho, stages.clone(), Mode::Inference);
        let tape = Tape::new();
        let vp = vit.bind(&tape, false);
        let out = ok(run(&vit, &vp, &Selector::Heuristic, &image, &sp, None))?;
        let targets = target_counts(n0, rho, stages.len());
        let positions_at = |layer: usize| -> Vec<usize> {
            match stages.iter().rposition(|&s| s <= layer) {
                Some(k) => out.state.masks[k].positions(),
                None => (0..=n0).collect(),
            }
        };
        let mut prev = RetentionMask::full(n0);
        for (k, &stage) in stages.iter().enumerate() {
            let kept = positions_at(stage - 1);
            let mut full = vec![f64::NEG_INFINITY; n0];
            for &p in &kept[1..] {
                let mut s = 0.0;
                for layer in 1..stage {
                    let rows = positions_at(layer);
                    let r = rows.binary_search(&p).expect("retained");
                    for m in &out.maps[layer - 1] {
                        s += m.value().at(0, r);
                    }
                }
                full[p - 1] = s / ((stage - 1) * cfg.heads) as f64;
            }
            let expected = ok(topk_select(&full, targets[k], &prev))?;
            ensure!(
                expected == out.state.masks[k],
                "stage {} heuristic mask differs from top-k of its scores",
                k + 1
            );
            prev = expected;
        }
        runs += 1;
    }

    let dir = ok(tempfile::tempdir())?;
    let config = ok(RunConfig::resolve(TINY, &["eval_samples=6".into()]))?;
    let inv = Invocation {
        config,
        out: dir.path().join("cmp"),
    };
    ok(commands::compare_baseline(&inv))?;
    let csv = ok(std::fs::read_to_string(dir.path().join("cmp/compare.csv")))?;
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    ensure!(rows.len() == 3, "compare-baseline wrote {} stage rows", rows.len());
    for r in &rows {
        let j: f64 = ok(r.rsplit(',').next().unwrap_or("").parse::<f64>())?;
        ensure!((0.0..=1.0).contains(&j), "Jaccard {j} out of range");
    }
    Ok(format!(
        "score error {worst:.1e}; {runs} engine runs match top-k; Jaccard rows {}",
        rows.join(" ")
    ))
}

const TINY: &str = "\
image_size = 16
patch_size = 4
channels = 3
embed_dim = 16
depth = 4
heads = 2
mlp_ratio = 2
num_classes = 2
square = 4
train_samples = 8
eval_samples = 4
pretrain_epochs = 1
epochs = 2
batch_size = 4
d_remap = 8
variants = full,remap_0
";

fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in ok(std::fs::read_dir(dir))? {
        let entry = ok(entry)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        out.insert(name, ok(std::fs::read(entry.path()))?);
    }
    Ok(out)
}

fn ac9_reproducibility() -> Outcome {
    let root = ok(tempfile::tempdir())?;
    let seeds = ["seed=3".to_string()];
    let run_twice = |name: &str,
                     extra: &[String],
                     f: fn(&Invocation) -> spot_core::error::Result<String>|
     -> Result<usize, String> {
        let mut overrides = seeds.to_vec();
        overrides.extend_from_slice(extra);
        let mut seen = Vec::new();
        for copy in ["a", "b"] {
            let inv = Invocation {
                config: ok(RunConfig::resolve(TINY, &overrides))?,
                out: root.path().join(copy).join(name),
            };
            ok(f(&inv))?;
            seen.push(files(&inv.out)?);
        }
        ensure!(seen[0] == seen[1], "{name}: artifacts differ between identical runs");
        Ok(seen[0].len())
    };
    let mut count = run_twice("train", &[], commands::train)?;
    let ckpt = root.path().join("a/train/model.ckpt");
    let with_ckpt = [format!("checkpoint={}", ckpt.display())];
    count += run_twice("eval", &with_ckpt, commands::eval)?;
    count += run_twice("flops", &[], |inv| commands::flops(inv, true))?;
    count += run_twice("visualize", &with_ckpt, commands::visualize)?;
    count += run_twice(
        "visualize-sampled",
        &[with_ckpt[0].clone(), "mode=training".into()],
        commands::visualize,
    )?;
    count += run_twice("stats", &with_ckpt, commands::stats_dump)?;
    count += run_twice("compare", &with_ckpt, commands::compare_baseline)?;
    count += run_twice("ablate", &[], commands::ablate)?;
    Ok(format!("{count} artifacts byte-identical across 8 subcommand runs"))
}
