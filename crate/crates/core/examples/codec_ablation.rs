//! Fine-tunes one fresh model per regression target codec on the same
//! mixed-type task and prints the held-out score of each, plus a target set
//! on which the power transforms break down.
//!
//! Usage: codec_ablation [epochs]

use portal::backbone::ModelConfig;
use portal::embed::EmbedderHandle;
use portal::error::Error;
use portal::finetune::{self, CodecKind, FinetuneConfig, FinetuneModel, Predictions};
use portal::ingest::Task;
use portal::synth;
use portal::value::CellValue;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(15), |s| s.parse())?;
    let table = synth::mixed_regression(200, 11);
    let config = ModelConfig::preset("mini")?;
    let embedder = EmbedderHandle::fallback(config.text_dim);
    let examples = finetune::prepare_examples(&table.rows, "value", &embedder, config.bins)?;
    let (train, test) = finetune::validation_split(examples, 0.2, 11)?;
    let targets: Vec<CellValue> = train.iter().map(|e| e.target.clone()).collect();
    let truth: Vec<f64> = test.iter().filter_map(|e| e.target.as_number()).collect();
    let features: Vec<_> = test.iter().map(|e| e.features.clone()).collect();

    println!("{:<28} {:>8} {:>10}", "codec", "R²", "best epoch");
    for kind in CodecKind::ALL {
        let spec = finetune::fit_task(Task::Regression, &targets, kind)?;
        let cfg = FinetuneConfig { max_epochs: epochs, patience: epochs, seed: 11, ..Default::default() };
        let mut model = FinetuneModel::<f32>::new(config.clone(), None, "value".into(), spec, &cfg, 11)?;
        let history = finetune::finetune(&mut model, &train, &train, &cfg, |_| {})?;
        let Predictions::Regression(pred) = finetune::predict_prepared(&model, &features)? else {
            anyhow::bail!("expected regression predictions");
        };
        println!("{:<28} {:>8.4} {:>10}", kind.to_string(), finetune::r2_capped(&pred, &truth)?, history.best_epoch);
    }

    // Large values spaced a few ulps apart: the fitted power transform maps
    // them all onto one float, so standardization has nothing to scale.
    let degenerate: Vec<CellValue> = (0..200).map(|i| CellValue::Number(1e17 + 16.0 * i as f64)).collect();
    for kind in [CodecKind::PowerL2, CodecKind::PowerTildeXe] {
        match finetune::fit_task(Task::Regression, &degenerate, kind) {
            Err(Error::CodecFailure(msg)) => println!("{kind} on degenerate targets: failure ({msg})"),
            other => println!("{kind} on degenerate targets: unexpected {other:?}"),
        }
    }
    Ok(())
}
