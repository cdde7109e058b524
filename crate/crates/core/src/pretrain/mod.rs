//! Masked-cell pre-training.
//!
//! Each epoch draws one row per table. Cells are masked independently, the
//! masked row is encoded and passed through the backbone, and the decoding
//! heads reconstruct every selected cell (including kept ones). Gradients
//! are accumulated over micro-batches up to the effective batch size.

mod mask;
mod rank;
mod schedule;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mask::{apply_mask, make_mask_plan, masked_targets, ColumnPools, MaskAction, MaskPlan, DEFAULT_MASK_PROBABILITY};
pub use rank::{relative_rank_score, similarity, validate_relative_rank, ValidationRow};
pub use schedule::{lr_at, ScheduleConfig};

use crate::autodiff::{Gradients, Graph};
use crate::embed::EmbedderHandle;
use crate::encoder::{prepare_row, TokenSpec};
use crate::error::{Error, Result};
use crate::heads::{LossBundle, LossWeights, MaskedTarget, TypeCounts};
use crate::ingest::{sample_epoch_rows, Table};
use crate::model::{hidden_states, PretrainModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Rows per optimizer update.
    pub batch_size: usize,
    /// Rows per forward/backward pass.
    pub micro_batch: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub mask_probability: f64,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Validate every this many epochs (and after the last); 0 validates
    /// only after the last epoch.
    pub validation_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 4096,
            micro_batch: 64,
            peak_lr: 3e-4,
            warmup_fraction: 0.05,
            mask_probability: DEFAULT_MASK_PROBABILITY,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            validation_interval: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config(format!("mask probability {} not in [0, 1]", self.mask_probability)));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("invalid peak learning rate {}", self.peak_lr)));
        }
        self.weights.validate()
    }

    pub fn updates_per_epoch(&self, tables: usize) -> usize {
        tables.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBundle,
    pub lr: f64,
    pub validation: Option<f64>,
}

pub fn write_metrics_line<W: Write>(w: &mut W, m: &EpochMetrics) -> Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Validation rows with the column pools of their tables.
pub struct ValidationSet {
    pub rows: Vec<(crate::ingest::Row, usize)>,
    pub pools: Vec<ColumnPools>,
}

impl ValidationSet {
    /// Removes the last row of the first `count` tables (those with at least
    /// two rows) into a validation set whose column pools cover the full
    /// original tables.
    pub fn hold_out(tables: &[Table], count: usize) -> (Vec<Table>, ValidationSet) {
        let mut train = tables.to_vec();
        let mut rows = Vec::new();
        let mut pools = Vec::new();
        for (t, table) in train.iter_mut().enumerate().take(count) {
            if table.rows.len() < 2 {
                continue;
            }
            pools.push(ColumnPools::from_rows(&tables[t].rows));
            rows.push((table.rows.pop().expect("non-empty"), pools.len() - 1));
        }
        (train, ValidationSet { rows, pools })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn view(&self) -> Vec<ValidationRow<'_>> {
        self.rows.iter().map(|(row, t)| ValidationRow { row, uniques: &self.pools[*t] }).collect()
    }
}

struct PreparedRow {
    masked: Vec<TokenSpec>,
    targets: Vec<(usize, crate::encoder::TokenContent)>,
}

/// Runs masked-cell pre-training and returns one metrics record per epoch.
/// `on_epoch` sees each record as soon as it is complete.
pub fn pretrain<T: Scalar>(
    model: &mut PretrainModel<T>,
    tables: &[Table],
    embedder: &EmbedderHandle,
    cfg: &PretrainConfig,
    validation: Option<&ValidationSet>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if tables.is_empty() {
        return Err(Error::invalid("pre-training needs at least one table"));
    }
    if embedder.dim() != model.config.text_dim {
        return Err(Error::EmbedConfig(format!(
            "embedder dim {} but the model expects {}",
            embedder.dim(),
            model.config.text_dim
        )));
    }
    let pools: Vec<ColumnPools> = tables.iter().map(|t| ColumnPools::from_rows(&t.rows)).collect();
    let per_epoch = cfg.updates_per_epoch(tables.len());
    let schedule = ScheduleConfig::triangular(cfg.peak_lr, cfg.warmup_fraction, per_epoch * cfg.epochs);
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bins = model.config.bins;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut update = 0usize;

    for epoch in 0..cfg.epochs {
        let sampled = sample_epoch_rows(tables, cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64))?;
        let mut epoch_loss = LossBundle::default();
        let mut lr = 0.0;
        let mut updates = 0usize;
        for batch in sampled.chunks(cfg.batch_size) {
            let mut prepared = Vec::with_capacity(batch.len());
            for s in batch {
                let row = s.resolve(tables);
                let Ok(specs) = prepare_row(row, embedder, bins) else { continue };
                let plan = make_mask_plan(row, &pools[s.table], cfg.mask_probability, &mut rng);
                let masked = apply_mask(&specs, &plan, embedder, bins)?;
                prepared.push(PreparedRow { masked, targets: masked_targets(&specs, &plan) });
            }
            let mut counts = TypeCounts::default();
            for p in &prepared {
                counts.add(TypeCounts::of(p.targets.iter().map(|(_, c)| c)));
            }

            lr = schedule.for_update(update);
            update += 1;
            let mut grads = Gradients::empty(model.store.len());
            let mut bundle = LossBundle::default();
            for micro in prepared.chunks(cfg.micro_batch) {
                if micro.iter().all(|p| p.targets.is_empty()) {
                    continue;
                }
                let rows: Vec<&[TokenSpec]> = micro.iter().map(|p| p.masked.as_slice()).collect();
                let mut g = Graph::new(&model.store);
                let (hidden, inputs) = hidden_states(&mut g, &model.encoder, &model.backbone, &rows, Some(&mut rng))?;
                let targets: Vec<MaskedTarget> = micro
                    .iter()
                    .enumerate()
                    .flat_map(|(b, p)| {
                        p.targets.iter().map(move |(i, c)| MaskedTarget { position: b * inputs.max_len + i, content: c.clone() })
                    })
                    .collect();
                let (loss, part) = model.heads.loss(&mut g, hidden, &targets, counts, &cfg.weights);
                if !part.total.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}: {part:?}")));
                }
                bundle.accumulate(&part);
                if let Some(loss) = loss {
                    grads.accumulate(g.backward(loss)?);
                }
            }
            opt.step(&mut model.store, &grads, lr).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("{m} at epoch {epoch}")),
                other => other,
            })?;
            epoch_loss.accumulate(&bundle);
            updates += 1;
        }
        if updates > 0 {
            scale_bundle(&mut epoch_loss, 1.0 / updates as f64);
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.validation_interval > 0 && (epoch + 1) % cfg.validation_interval == 0;
        let val = match validation {
            Some(v) if due || last => Some(validate_relative_rank(model, &v.view(), embedder)?),
            _ => None,
        };
        let m = EpochMetrics { epoch, loss: epoch_loss, lr, validation: val };
        on_epoch(&m)?;
        log.push(m);
    }
    Ok(log)
}

fn scale_bundle(b: &mut LossBundle, s: f64) {
    b.day *= s;
    b.month *= s;
    b.year *= s;
    b.sign *= s;
    b.fraction *= s;
    b.exponent *= s;
    b.text *= s;
    b.total *= s;
}
