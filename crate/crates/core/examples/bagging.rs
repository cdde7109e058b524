//! Trains a small bag of regression models with different seeds, then
//! compares each member with the averaged ensemble and a top-n selection.
//!
//! Usage: bagging [members] [epochs]

use rayon::prelude::*;

use portal::backbone::ModelConfig;
use portal::embed::EmbedderHandle;
use portal::finetune::{self, CodecKind, Example, FinetuneConfig, FinetuneModel, Predictions};
use portal::ingest::Task;
use portal::synth;

fn member(train: &[Example], test: &[Example], epochs: usize, seed: u64) -> anyhow::Result<(f64, Predictions)> {
    let config = ModelConfig::preset("mini")?;
    let targets: Vec<_> = train.iter().map(|e| e.target.clone()).collect();
    let spec = finetune::fit_task(Task::Regression, &targets, CodecKind::ScalarL2)?;
    let cfg = FinetuneConfig { max_epochs: epochs, patience: epochs, seed, ..Default::default() };
    let (fit, valid) = finetune::validation_split(train.to_vec(), cfg.valid_fraction, seed)?;
    let mut model = FinetuneModel::<f32>::new(config, None, "y".into(), spec, &cfg, seed)?;
    let history = finetune::finetune(&mut model, &fit, &valid, &cfg, |_| {})?;
    let features: Vec<_> = test.iter().map(|e| e.features.clone()).collect();
    Ok((history.best().valid_metric, finetune::predict_prepared(&model, &features)?))
}

fn mse(p: &Predictions, truth: &[f64]) -> anyhow::Result<f64> {
    let Predictions::Regression(v) = p else { anyhow::bail!("expected regression predictions") };
    Ok(finetune::mean_squared_error(v, truth)?)
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(Ok(5), |s| s.parse())?;
    let epochs: usize = args.get(1).map_or(Ok(40), |s| s.parse())?;

    let table = synth::linear_regression(160, 0.1, 21);
    let config = ModelConfig::preset("mini")?;
    let embedder = EmbedderHandle::fallback(config.text_dim);
    let examples = finetune::prepare_examples(&table.rows, "y", &embedder, config.bins)?;
    let (train, test) = finetune::validation_split(examples, 0.25, 21)?;
    let truth: Vec<f64> = test.iter().filter_map(|e| e.target.as_number()).collect();

    let members: Vec<(f64, Predictions)> =
        (0..n as u64).into_par_iter().map(|s| member(&train, &test, epochs, s)).collect::<anyhow::Result<_>>()?;
    for (i, (valid_r2, p)) in members.iter().enumerate() {
        println!("member {i}: validation R² {valid_r2:.4}  test MSE {:.5}", mse(p, &truth)?);
    }
    let preds: Vec<Predictions> = members.iter().map(|(_, p)| p.clone()).collect();
    let mean_member = preds.iter().map(|p| mse(p, &truth)).sum::<anyhow::Result<f64>>()? / n as f64;
    println!("mean member test MSE {mean_member:.5}");
    println!("ensemble test MSE    {:.5}", mse(&finetune::bag_predictions(&preds)?, &truth)?);

    let scores: Vec<f64> = members.iter().map(|(s, _)| *s).collect();
    let top = finetune::select_top_n(&scores, n.div_ceil(2));
    let chosen: Vec<Predictions> = top.iter().map(|&i| preds[i].clone()).collect();
    println!("top {} by validation {:?}: test MSE {:.5}", top.len(), top, mse(&finetune::bag_predictions(&chosen)?, &truth)?);
    Ok(())
}
