//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test --test acceptance`.
//!
//! The exit status is nonzero when a hard criterion fails. A9 is a soft
//! criterion: its line still reads FAIL when the gate is missed, but it is
//! reported rather than failing the test run.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use portal::autodiff::{gradient_check, Graph};
use portal::backbone::{BackboneParams, ModelConfig, TokenBatch};
use portal::checkpoint::{Checkpoint, EmbedderInfo};
use portal::embed::EmbedderHandle;
use portal::encoder::{prepare_row, EncoderInputs, TokenSpec};
use portal::error::Error;
use portal::finetune::{self, CodecKind, Example, FinetuneConfig, FinetuneModel, Predictions};
use portal::heads::{tilde_alpha, total_loss, LossWeights, MaskedTarget, TypeCounts};
use portal::ingest::{emit_csv, Row, Task};
use portal::model::{hidden_states, PretrainModel};
use portal::pretrain::{
    make_mask_plan, pretrain, validate_relative_rank, ColumnPools, MaskAction, PretrainConfig, ValidationSet,
};
use portal::synth;
use portal::tensor::Matrix;
use portal::value::CellValue;
use portal::encoder::numeric::decompose_number;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn a1_codec_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut checked = 0;
    for _ in 0..100_000 {
        let e: i32 = rng.random_range(-126..=126);
        let m: f64 = rng.random_range(1.0..2.0);
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let x = s * m * 2f64.powi(e);
        let back = decompose_number(x).map_err(err)?.reconstruct();
        ensure(back.to_bits() == x.to_bits(), format!("{x:e} reconstructed as {back:e}"))?;
        checked += 1;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(1), format!("took {:.3}s", secs(t)))?;
    Ok(format!("{checked} values bit-exact in {:.3}s", secs(t)))
}

fn a2_continuity() -> Outcome {
    let tilde = |x: f64| -> Result<f64, String> {
        let t = decompose_number(x).map_err(err)?;
        Ok(tilde_alpha(t.alpha, t.beta))
    };
    let raw = |x: f64| -> Result<f64, String> { Ok(decompose_number(x).map_err(err)?.alpha - 1.0) };
    let (mut max_tilde, mut min_raw) = (0.0f64, f64::INFINITY);
    let mut boundaries = 0;
    for k in -60..=60 {
        let x = 2f64.powi(k);
        let below = f64::from_bits(x.to_bits() - 1);
        let above = f64::from_bits(x.to_bits() + 1);
        max_tilde = max_tilde.max((tilde(above)? - tilde(below)?).abs());
        min_raw = min_raw.min((raw(above)? - raw(below)?).abs());
        boundaries += 1;
    }
    ensure(boundaries == 121, "wrong boundary count")?;
    ensure(max_tilde < 1e-6, format!("continuous target jumps by {max_tilde:e}"))?;
    ensure(min_raw >= 0.99, format!("alpha-1 target jumps by only {min_raw}"))?;
    Ok(format!("max continuous jump {max_tilde:.2e}, min alpha-1 jump {min_raw:.6} over {boundaries} boundaries"))
}

fn a3_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cols = 10;
    let rows: Vec<Row> = (0..100_000)
        .map(|_| {
            Row::new(
                (0..cols)
                    .map(|c| (format!("c{c}"), CellValue::Number(rng.random_range(0..20) as f64 + c as f64 * 100.0)))
                    .collect(),
            )
        })
        .collect();
    let pools = ColumnPools::from_rows(&rows[..200]);
    let mut counts = [0usize; 4];
    let mut cells = 0usize;
    for row in &rows {
        let plan = make_mask_plan(row, &pools, 0.3, &mut rng);
        for (cell, action) in row.cells.iter().zip(&plan.actions) {
            cells += 1;
            match action {
                MaskAction::Unmasked => counts[0] += 1,
                MaskAction::Zeroed => counts[1] += 1,
                MaskAction::Kept => counts[2] += 1,
                MaskAction::Replaced(v) => {
                    counts[3] += 1;
                    ensure(pools.get(&cell.column).contains(v), format!("replacement {v:?} not from column {}", cell.column))?;
                    ensure(*v != cell.value, "replacement equals the original value")?;
                }
            }
        }
    }
    ensure(cells == 1_000_000, format!("{cells} cells"))?;
    let selected = (cells - counts[0]) as f64;
    let frac = selected / cells as f64;
    let split = [counts[1] as f64 / selected, counts[2] as f64 / selected, counts[3] as f64 / selected];
    ensure((frac - 0.3).abs() <= 0.005, format!("selected fraction {frac}"))?;
    for (got, want) in split.iter().zip([0.8, 0.1, 0.1]) {
        ensure((got - want).abs() <= 0.01, format!("action split {split:?}"))?;
    }
    Ok(format!("selected {frac:.4}, split {:.4}/{:.4}/{:.4}, replacements from column pools", split[0], split[1], split[2]))
}

fn a4_loss_weights() -> Outcome {
    let w = LossWeights::default();
    ensure(w.text == 1.0 / 3.0, format!("text weight {}", w.text))?;
    for (name, v) in [("day", w.day), ("month", w.month), ("year", w.year), ("sign", w.sign), ("fraction", w.fraction), ("exponent", w.exponent)] {
        ensure(v == 1.0 / 9.0, format!("{name} weight {v}"))?;
    }
    let sum: f64 = w.as_array().iter().sum();
    ensure((sum - 1.0).abs() <= 1e-12, format!("weights sum to {sum}"))?;
    let t = total_loss(&[1.0; 7], &w);
    ensure((t - 1.0).abs() <= 1e-12, format!("total of unit components {t}"))?;
    Ok(format!("text 1/3, others 1/9, sum {sum}, unit total {t}"))
}

fn mixed_row() -> Row {
    Row::new(vec![
        ("amount".into(), CellValue::Number(-6.25)),
        ("opened".into(), CellValue::parse_as("2011-07-04", portal::ingest::ColumnType::Date)),
        ("city".into(), CellValue::Text("lisbon".into())),
    ])
}

fn a5_gradient_check() -> Outcome {
    let mut cfg = ModelConfig::custom(2, 32, 1);
    cfg.bins = 4;
    cfg.text_dim = 8;
    let model = PretrainModel::<f64>::init(cfg.clone(), 5).map_err(err)?;
    let embedder = EmbedderHandle::fallback(cfg.text_dim);
    let specs = prepare_row(&mixed_row(), &embedder, cfg.bins).map_err(err)?;
    ensure(specs.len() == 3, "expected three tokens")?;
    let targets: Vec<MaskedTarget> =
        specs.iter().enumerate().map(|(i, s)| MaskedTarget { position: i, content: s.content.clone() }).collect();
    let counts = TypeCounts::of(specs.iter().map(|s| &s.content));
    let weights = LossWeights::default();
    let start = Instant::now();
    let report = gradient_check(&model.store, 1e-6, |g| {
        let (hidden, _) =
            hidden_states(g, &model.encoder, &model.backbone, &[specs.as_slice()], None::<&mut ChaCha8Rng>).expect("forward");
        model.heads.loss(g, hidden, &targets, counts, &weights).0.expect("loss")
    })
    .map_err(err)?;
    let t = start.elapsed();
    ensure(report.max_relative_error < 1e-5, format!("max relative error {:e} at {:?}", report.max_relative_error, report.worst))?;
    ensure(t < Duration::from_secs(30), format!("took {:.1}s", secs(t)))?;
    Ok(format!("{} entries, max relative error {:.2e}, {:.1}s", report.entries, report.max_relative_error, secs(t)))
}

fn gather_rows<T: portal::tensor::Scalar>(m: &Matrix<T>, order: &[usize]) -> Matrix<T> {
    Matrix::from_rows(&order.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>())
}

fn permutation_gap<T: portal::tensor::Scalar>(seed: u64) -> Result<f64, String> {
    let cfg = ModelConfig::preset("mini").map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = portal::autodiff::ParamStore::<T>::new();
    let backbone = BackboneParams::register(&mut store, &cfg, &mut rng).map_err(err)?;
    let mut worst = 0.0f64;
    let mut seqs = Vec::new();
    let mut perms = Vec::new();
    for _ in 0..100 {
        let len = rng.random_range(2..10);
        let data = (0..len * cfg.hidden).map(|_| T::from(rng.random_range(-1.0..1.0)).unwrap()).collect();
        seqs.push(Matrix::from_vec(len, cfg.hidden, data));
        let mut p: Vec<usize> = (0..len).collect();
        p.shuffle(&mut rng);
        perms.push(p);
    }
    let permuted: Vec<Matrix<T>> = seqs.iter().zip(&perms).map(|(s, p)| gather_rows(s, p)).collect();
    let out = backbone.forward(&store, &TokenBatch::from_sequences(&seqs).map_err(err)?, false, &mut rng).map_err(err)?;
    let out_p = backbone.forward(&store, &TokenBatch::from_sequences(&permuted).map_err(err)?, false, &mut rng).map_err(err)?;
    for (b, p) in perms.iter().enumerate() {
        let expect = gather_rows(&out.sequence(b), p);
        let got = out_p.sequence(b);
        for (x, y) in expect.data().iter().zip(got.data()) {
            worst = worst.max((x.to_f64().unwrap() - y.to_f64().unwrap()).abs());
        }
    }
    Ok(worst)
}

fn a6_permutation() -> Outcome {
    let d64 = permutation_gap::<f64>(6)?;
    let d32 = permutation_gap::<f32>(6)?;
    ensure(d64 == 0.0, format!("double precision gap {d64:e}"))?;
    ensure(d32 < 1e-5, format!("single precision gap {d32:e}"))?;
    Ok(format!("100 rows: max diff {d64:e} (f64), {d32:e} (f32)"))
}

fn regression_examples(table: &portal::ingest::Table, target: &str, cfg: &ModelConfig) -> Result<(Vec<Example>, EmbedderHandle), String> {
    let embedder = EmbedderHandle::fallback(cfg.text_dim);
    let ex = finetune::prepare_examples(&table.rows, target, &embedder, cfg.bins).map_err(err)?;
    Ok((ex, embedder))
}

fn targets_of(ex: &[Example]) -> Vec<CellValue> {
    ex.iter().map(|e| e.target.clone()).collect()
}

fn numbers_of(ex: &[Example]) -> Vec<f64> {
    ex.iter().map(|e| e.target.as_number().unwrap_or(f64::NAN)).collect()
}

fn memorization_config(epochs: usize, seed: u64) -> FinetuneConfig {
    FinetuneConfig { max_epochs: epochs, patience: epochs, valid_fraction: 0.0, seed, ..Default::default() }
}

/// Trains one memorization member and returns its train predictions.
fn memorization_member(ex: &[Example], epochs: usize, seed: u64) -> Result<(Vec<f64>, usize), String> {
    let cfg = ModelConfig::preset("mini").map_err(err)?;
    let spec = finetune::fit_task(Task::Regression, &targets_of(ex), CodecKind::ScalarL2).map_err(err)?;
    let fc = memorization_config(epochs, seed);
    let mut model = FinetuneModel::<f32>::new(cfg, None, "y".into(), spec, &fc, seed).map_err(err)?;
    let history = finetune::finetune(&mut model, ex, ex, &fc, |_| {}).map_err(err)?;
    let features: Vec<Vec<TokenSpec>> = ex.iter().map(|e| e.features.clone()).collect();
    match finetune::predict_prepared(&model, &features).map_err(err)? {
        Predictions::Regression(p) => Ok((p, history.epochs.len())),
        Predictions::Classification { .. } => Err("expected regression output".into()),
    }
}

fn a7_memorization() -> Outcome {
    let cfg = ModelConfig::preset("mini").map_err(err)?;
    let table = synth::linear_regression(64, 0.01, 3);
    let (ex, _) = regression_examples(&table, "y", &cfg)?;
    let start = Instant::now();
    let (pred, epochs) = memorization_member(&ex, 200, 0)?;
    let t = start.elapsed();
    let r2 = finetune::r2_capped(&pred, &numbers_of(&ex)).map_err(err)?;
    ensure(r2 >= 0.99, format!("train R² {r2}"))?;
    ensure(t < Duration::from_secs(300), format!("took {:.1}s", secs(t)))?;
    Ok(format!("train R² {r2:.4} after {epochs} epochs, {:.1}s on this machine", secs(t)))
}

struct PretrainRun {
    model: PretrainModel<f32>,
    untrained: f64,
    trained: f64,
    seconds: f64,
}

fn a8_config() -> PretrainConfig {
    PretrainConfig { epochs: 30, batch_size: 8, micro_batch: 8, peak_lr: 1e-3, seed: 1, validation_interval: 0, ..Default::default() }
}

fn run_a8() -> Result<PretrainRun, String> {
    let corpus = synth::dependent_corpus(200, 50, 7);
    let (train, validation) = ValidationSet::hold_out(&corpus, 100);
    let cfg = ModelConfig::preset("mini").map_err(err)?;
    let embedder = EmbedderHandle::fallback(cfg.text_dim);
    let mut model = PretrainModel::<f32>::init(cfg, 1).map_err(err)?;
    let untrained = validate_relative_rank(&model, &validation.view(), &embedder).map_err(err)?;
    let start = Instant::now();
    let log = pretrain(&mut model, &train, &embedder, &a8_config(), Some(&validation), |_| Ok(())).map_err(err)?;
    let trained = log.last().and_then(|m| m.validation).ok_or("no validation score")?;
    Ok(PretrainRun { model, untrained, trained, seconds: start.elapsed().as_secs_f64() })
}

fn a8_learnability(run: &Result<PretrainRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    ensure(run.trained >= 0.90, format!("trained rank score {:.4}", run.trained))?;
    ensure(run.untrained <= 0.55, format!("untrained rank score {:.4}", run.untrained))?;
    ensure(run.seconds < 900.0, format!("took {:.1}s", run.seconds))?;
    Ok(format!("rank score {:.4} trained vs {:.4} untrained, {:.1}s", run.trained, run.untrained, run.seconds))
}

struct Transfer {
    /// Mean epochs to reach the common target, pretrained then random init.
    reach: [f64; 2],
    /// Mean best validation loss per arm.
    best: [f64; 2],
    /// Mean validation loss per epoch over the seeds still running.
    curves: [Vec<f64>; 2],
}

fn transfer_trial(backbone: &portal::autodiff::ParamStore<f32>, cfg: &ModelConfig, template: &FinetuneConfig) -> Result<Transfer, String> {
    let embedder = EmbedderHandle::fallback(cfg.text_dim);
    let seeds = 5u64;
    let mut out = Transfer { reach: [0.0; 2], best: [0.0; 2], curves: [Vec::new(), Vec::new()] };
    let mut sums = [Vec::new(), Vec::new()];
    for seed in 0..seeds {
        let fresh = synth::dependent_corpus(2, 64, 1_000 + seed);
        let train = finetune::prepare_examples(&fresh[0].rows, "price", &embedder, cfg.bins).map_err(err)?;
        let valid = finetune::prepare_examples(&fresh[1].rows, "price", &embedder, cfg.bins).map_err(err)?;
        let spec = finetune::fit_task(Task::Regression, &targets_of(&train), CodecKind::ScalarL2).map_err(err)?;
        let fc = FinetuneConfig { seed, ..template.clone() };
        let mut losses = [Vec::new(), Vec::new()];
        for (arm, init) in [Some(backbone), None].into_iter().enumerate() {
            let mut model = FinetuneModel::<f32>::new(cfg.clone(), init, "price".into(), spec.clone(), &fc, seed).map_err(err)?;
            let h = finetune::finetune(&mut model, &train, &valid, &fc, |_| {}).map_err(err)?;
            ensure(!h.epochs.is_empty(), "run produced no epochs")?;
            losses[arm] = h.epochs.iter().map(|r| r.valid_loss).collect::<Vec<f64>>();
        }
        let best = |l: &[f64]| l.iter().cloned().fold(f64::INFINITY, f64::min);
        // The common target is the best loss of the weaker arm, so both arms reach it.
        let target = best(&losses[0]).max(best(&losses[1]));
        for arm in 0..2 {
            let first = losses[arm].iter().position(|&l| l <= target).expect("target reached") + 1;
            out.reach[arm] += first as f64 / seeds as f64;
            out.best[arm] += best(&losses[arm]) / seeds as f64;
            for (e, &l) in losses[arm].iter().enumerate() {
                if sums[arm].len() <= e {
                    sums[arm].push((0.0, 0));
                }
                sums[arm][e].0 += l;
                sums[arm][e].1 += 1;
            }
        }
    }
    for arm in 0..2 {
        out.curves[arm] = sums[arm].iter().map(|(s, n)| s / *n as f64).collect();
    }
    Ok(out)
}

fn a9_transfer(run: &Result<PretrainRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("a8.ckpt");
    let info = EmbedderInfo { kind: portal::embed::EmbedderKind::Fallback, dim: run.model.config.text_dim };
    Checkpoint::from_pretrain(&run.model, info, serde_json::Value::Null).save(&path).map_err(err)?;
    let ck = Checkpoint::load(&path).map_err(err)?;
    let backbone = ck.backbone_store::<f32>();
    let cfg = ck.meta.model.clone();
    let show = |c: &[f64]| c.iter().step_by(10).map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");

    // Not gated: the same comparison with a ten times larger learning rate.
    let fast = FinetuneConfig { max_epochs: 30, patience: 30, peak_lr: 1e-3, ..Default::default() };
    let side = transfer_trial(&backbone, &cfg, &fast)?;
    println!(
        "     A9 info, peak LR 1e-3 over 30 epochs: epochs to target pretrained {:.1} vs random {:.1}, best loss {:.4} vs {:.4}",
        side.reach[0], side.reach[1], side.best[0], side.best[1]
    );

    let main = transfer_trial(&backbone, &cfg, &FinetuneConfig::default())?;
    println!("     A9 mean validation loss every 10 epochs, pretrained:  {}", show(&main.curves[0]));
    println!("     A9 mean validation loss every 10 epochs, random init: {}", show(&main.curves[1]));
    let [pre, rand] = main.reach;
    let detail = format!(
        "default fine-tuning, epochs to common target: pretrained {pre:.1}, random init {rand:.1}; best loss {:.4} vs {:.4} (5 seeds)",
        main.best[0], main.best[1]
    );
    ensure(pre <= 1.1 * rand, detail.clone())?;
    Ok(detail)
}

fn a10_bagging() -> Outcome {
    let cfg = ModelConfig::preset("mini").map_err(err)?;
    let table = synth::linear_regression(64, 0.01, 3);
    let (ex, _) = regression_examples(&table, "y", &cfg)?;
    let ys = numbers_of(&ex);
    let members: Vec<Result<(Vec<f64>, usize), String>> = {
        use rayon::prelude::*;
        (0..10u64).into_par_iter().map(|s| memorization_member(&ex, 50, s)).collect()
    };
    let preds: Vec<Predictions> = members.into_iter().map(|m| m.map(|(p, _)| Predictions::Regression(p))).collect::<Result<_, _>>()?;
    let Predictions::Regression(bag) = finetune::bag_predictions(&preds).map_err(err)? else { unreachable!() };
    let ensemble = finetune::mean_squared_error(&bag, &ys).map_err(err)?;
    let member_mse: Vec<f64> = preds
        .iter()
        .map(|p| match p {
            Predictions::Regression(v) => finetune::mean_squared_error(v, &ys).map_err(err),
            _ => unreachable!(),
        })
        .collect::<Result<_, _>>()?;
    let mean_member = member_mse.iter().sum::<f64>() / member_mse.len() as f64;
    ensure(ensemble <= mean_member, format!("ensemble MSE {ensemble:e} > mean member MSE {mean_member:e}"))?;
    Ok(format!("10 members: ensemble MSE {ensemble:.3e} <= mean member MSE {mean_member:.3e}"))
}

fn a11_codecs() -> Outcome {
    let cfg = ModelConfig::preset("mini").map_err(err)?;
    let table = synth::mixed_regression(200, 11);
    let (ex, _) = regression_examples(&table, "value", &cfg)?;
    let (train, valid) = finetune::validation_split(ex, 0.2, 11).map_err(err)?;
    let ys = numbers_of(&valid);
    let feats: Vec<Vec<TokenSpec>> = valid.iter().map(|e| e.features.clone()).collect();
    let mut summary = Vec::new();
    for kind in CodecKind::ALL {
        let spec = finetune::fit_task(Task::Regression, &targets_of(&train), kind).map_err(|e| format!("{kind}: {e}"))?;
        let fc = FinetuneConfig { max_epochs: 3, patience: 3, seed: 11, ..Default::default() };
        let mut model = FinetuneModel::<f32>::new(cfg.clone(), None, "value".into(), spec, &fc, 11).map_err(err)?;
        let h = finetune::finetune(&mut model, &train, &valid, &fc, |_| {}).map_err(|e| format!("{kind}: {e}"))?;
        let Predictions::Regression(p) = finetune::predict_prepared(&model, &feats).map_err(err)? else { unreachable!() };
        let r2 = finetune::r2_capped(&p, &ys).map_err(err)?;
        ensure(h.epochs.iter().all(|r| r.valid_loss.is_finite() && r.train_loss.is_finite()), format!("{kind}: non-finite loss"))?;
        ensure(p.iter().all(|v| v.is_finite()) && r2.is_finite(), format!("{kind}: non-finite predictions"))?;
        summary.push(format!("{kind} {r2:.2}"));
    }
    let degenerate: Vec<CellValue> = (0..200).map(|i| CellValue::Number(1e17 + 16.0 * i as f64)).collect();
    for kind in [CodecKind::PowerL2, CodecKind::PowerTildeXe] {
        let r = finetune::fit_task(Task::Regression, &degenerate, kind);
        ensure(matches!(r, Err(Error::CodecFailure(_))), format!("{kind} did not fail on the degenerate targets: {r:?}"))?;
    }
    ensure(finetune::fit_task(Task::Regression, &degenerate, CodecKind::ScalarL2).is_ok(), "scalar_L2 failed on degenerate targets")?;
    Ok(format!("all 10 codecs finite (R² after 3 epochs: {}); power codecs raise codec failure on degenerate targets", summary.join(", ")))
}

fn encode_rows(model: &PretrainModel<f32>, rows: &[Row], embedder: &EmbedderHandle) -> Result<Vec<Vec<u32>>, String> {
    let specs: Vec<Vec<TokenSpec>> = rows.iter().map(|r| prepare_row(r, embedder, model.config.bins)).collect::<Result<_, _>>().map_err(err)?;
    let inputs = EncoderInputs::build(&specs, &model.encoder).map_err(err)?;
    let mut g = Graph::new(&model.store);
    let tokens = model.encoder.tokens(&mut g, &inputs);
    let m = g.value(tokens);
    let d = m.cols();
    Ok((0..rows.len())
        .map(|b| {
            let start = b * inputs.max_len * d;
            m.data()[start..start + inputs.lengths[b] * d].iter().map(|v| v.to_bits()).collect()
        })
        .collect())
}

fn a12_outliers() -> Outcome {
    let cfg = ModelConfig::preset("mini").map_err(err)?;
    let model = PretrainModel::<f32>::init(cfg.clone(), 12).map_err(err)?;
    let embedder = EmbedderHandle::fallback(cfg.text_dim);
    let mut checked = 0;
    for (name, table, column) in [
        ("mixed", synth::mixed_regression(50, 12), "size"),
        ("linear", synth::linear_regression(50, 0.1, 12), "x1"),
        ("threshold", synth::threshold_classification(50, 12), "a"),
    ] {
        let before = encode_rows(&model, &table.rows, &embedder)?;
        let mut rows = table.rows.clone();
        let mut outlier = rows[0].clone();
        for c in &mut outlier.cells {
            if c.column == column {
                c.value = CellValue::Number(1e30);
            }
        }
        rows.push(outlier);
        let after = encode_rows(&model, &rows, &embedder)?;
        for (b, (x, y)) in before.iter().zip(&after).enumerate() {
            ensure(x == y, format!("{name}: row {b} changed after appending an outlier"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} rows bit-identical after appending a 1e30 row to 3 tables"))
}

fn write_corpus(dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(err)?;
    for t in synth::dependent_corpus(4, 12, 13) {
        let f = std::fs::File::create(dir.join(format!("{}.csv", t.name))).map_err(err)?;
        emit_csv(&t.manifest, &t.rows, f).map_err(err)?;
    }
    Ok(())
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["portal"];
    full.extend_from_slice(args);
    match portal::cli::run(full) {
        0 => Ok(()),
        code => Err(format!("`portal {}` exited with {code}", args.join(" "))),
    }
}

fn a13_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("data");
    write_corpus(&data)?;
    let train = dir.path().join("train.csv");
    let table = synth::mixed_regression(24, 13);
    emit_csv(&table.manifest, &table.rows, std::fs::File::create(&train).map_err(err)?).map_err(err)?;
    let p = |name: &str| dir.path().join(name).display().to_string();
    let small = ["--set", "layers=1", "--set", "hidden=64", "--set", "text_dim=32"];
    for out in ["pre_a.ckpt", "pre_b.ckpt"] {
        let mut args = vec!["pretrain", "--data", data.to_str().unwrap(), "--out"];
        let o = p(out);
        args.push(&o);
        args.extend_from_slice(&["--seed", "5", "--set", "pretrain.epochs=3", "--set", "pretrain.batch_size=2"]);
        args.extend_from_slice(&small);
        run_cli(&args)?;
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).map_err(err);
    let (a, b) = (read("pre_a.ckpt")?, read("pre_b.ckpt")?);
    ensure(&a[..8] == b"PORTALCK", "missing magic")?;
    ensure(a == b, "pre-training checkpoints differ")?;
    for out in ["ft_a.ckpt", "ft_b.ckpt"] {
        let (o, from, t) = (p(out), p("pre_a.ckpt"), train.display().to_string());
        let mut args = vec!["finetune", "--train", &t, "--target", "value", "--task", "regression", "--from", &from, "--out", &o];
        args.extend_from_slice(&["--seed", "5", "--set", "finetune.max_epochs=3", "--set", "finetune.patience=3", "--set", "text_dim=32"]);
        run_cli(&args)?;
    }
    let (c, d) = (read("ft_a.ckpt")?, read("ft_b.ckpt")?);
    ensure(c == d, "fine-tuning checkpoints differ")?;
    Ok(format!("pretrain ({} bytes) and finetune ({} bytes) checkpoints byte-identical across runs", a.len(), c.len()))
}

fn main() {
    let quiet = std::env::args().any(|a| a == "--list");
    if quiet {
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    let mut soft_failures = 0;
    let mut report = |id: &str, title: &str, soft: bool, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let t = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {title}: {detail} [{t:.1}s]"),
            Err(detail) if soft => {
                soft_failures += 1;
                println!("FAIL {id} {title} (soft): {detail} [{t:.1}s]");
            }
            Err(detail) => {
                failures += 1;
                println!("FAIL {id} {title}: {detail} [{t:.1}s]");
            }
        }
    };
    report("A1", "numeric codec exactness", false, &mut a1_codec_exactness);
    report("A2", "continuity of the fraction target", false, &mut a2_continuity);
    report("A3", "masking statistics", false, &mut a3_masking);
    report("A4", "loss weights", false, &mut a4_loss_weights);
    report("A5", "gradient check", false, &mut a5_gradient_check);
    report("A6", "permutation equivariance", false, &mut a6_permutation);
    report("A7", "memorization sanity", false, &mut a7_memorization);
    let run = panic::catch_unwind(run_a8).unwrap_or_else(|_| Err("pre-training panicked".into()));
    report("A8", "pre-training learnability", false, &mut || a8_learnability(&run));
    report("A9", "pre-training transfer direction", true, &mut || a9_transfer(&run));
    report("A10", "bagging inequality", false, &mut a10_bagging);
    report("A11", "codec coverage", false, &mut a11_codecs);
    report("A12", "outlier invariance", false, &mut a12_outliers);
    report("A13", "determinism", false, &mut a13_determinism);
    if soft_failures > 0 {
        println!("{soft_failures} soft criterion missed its gate (reported, not fatal)");
    }
    if failures > 0 {
        println!("{failures} hard acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all hard acceptance criteria passed");
}
