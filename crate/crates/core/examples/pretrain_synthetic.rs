//! Masked-cell pre-training on a synthetic corpus where the price and
//! release date of a row are determined by its item name. Prints the loss
//! per epoch and the held-out relative rank score before and after.
//!
//! Usage: pretrain_synthetic [epochs] [out.ckpt]

use std::path::PathBuf;
use std::time::Instant;

use portal::backbone::ModelConfig;
use portal::checkpoint::{Checkpoint, EmbedderInfo};
use portal::embed::EmbedderHandle;
use portal::model::PretrainModel;
use portal::pretrain::{pretrain, validate_relative_rank, PretrainConfig, ValidationSet};
use portal::synth;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(Ok(30), |s| s.parse())?;
    let out = args.get(1).map(PathBuf::from);

    let corpus = synth::dependent_corpus(200, 50, 7);
    let (train, validation) = ValidationSet::hold_out(&corpus, 100);
    let config = ModelConfig::preset("mini")?;
    let embedder = EmbedderHandle::fallback(config.text_dim);
    let mut model = PretrainModel::<f32>::init(config, 1)?;
    println!("untrained rank score {:.4}", validate_relative_rank(&model, &validation.view(), &embedder)?);

    let cfg = PretrainConfig { epochs, batch_size: 8, micro_batch: 8, peak_lr: 1e-3, seed: 1, validation_interval: 10, ..Default::default() };
    let start = Instant::now();
    pretrain(&mut model, &train, &embedder, &cfg, Some(&validation), |m| {
        let rank = m.validation.map_or(String::new(), |v| format!("  rank {v:.4}"));
        println!("epoch {:2}  loss {:.4}  lr {:.2e}{rank}  {:.1}s", m.epoch, m.loss.total, m.lr, start.elapsed().as_secs_f64());
        Ok(())
    })?;

    if let Some(path) = out {
        let info = EmbedderInfo { kind: embedder.kind(), dim: embedder.dim() };
        Checkpoint::from_pretrain(&model, info, serde_json::json!({"epochs": epochs})).save(&path)?;
        println!("saved {}", path.display());
    }
    Ok(())
}
