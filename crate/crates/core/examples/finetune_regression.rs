//! Fine-tunes a fresh mini model on a small synthetic regression table and
//! reports how well it fits the training rows.
//!
//! Usage: finetune_regression [codec] [epochs] [peak_lr]

use std::time::Instant;

use portal::backbone::ModelConfig;
use portal::embed::EmbedderHandle;
use portal::finetune::{self, CodecKind, FinetuneConfig, FinetuneModel, Predictions};
use portal::ingest::Task;
use portal::synth;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let codec: CodecKind = args.first().map_or("scalar_L2", String::as_str).parse()?;
    let epochs: usize = args.get(1).map_or(Ok(200), |s| s.parse())?;
    let peak_lr: f64 = args.get(2).map_or(Ok(1e-4), |s| s.parse())?;

    let table = synth::linear_regression(64, 0.01, 3);
    let config = ModelConfig::preset("mini")?;
    let embedder = EmbedderHandle::fallback(config.text_dim);
    let examples = finetune::prepare_examples(&table.rows, "y", &embedder, config.bins)?;
    let targets: Vec<_> = examples.iter().map(|e| e.target.clone()).collect();
    let spec = finetune::fit_task(Task::Regression, &targets, codec)?;

    let cfg = FinetuneConfig { max_epochs: epochs, patience: epochs, peak_lr, valid_fraction: 0.0, ..Default::default() };
    let mut model = FinetuneModel::<f32>::new(config, None, "y".into(), spec, &cfg, 0)?;
    let start = Instant::now();
    let history = finetune::finetune(&mut model, &examples, &examples, &cfg, |r| {
        if r.epoch % 10 == 0 {
            println!("epoch {:3}  train loss {:.5}  R² {:.4}  {:.1}s", r.epoch, r.train_loss, r.valid_metric, start.elapsed().as_secs_f64());
        }
    })?;
    let Predictions::Regression(pred) = finetune::predict(&model, &table.rows, &embedder)? else {
        anyhow::bail!("expected regression predictions");
    };
    let ys: Vec<f64> = examples.iter().map(|e| e.target.as_number().unwrap_or(f64::NAN)).collect();
    println!(
        "best epoch {}  train R² {:.4}  ({:.1}s)",
        history.best_epoch,
        finetune::r2_capped(&pred, &ys)?,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
