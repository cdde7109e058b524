//! Supervised fine-tuning on top of the encoder and backbone.
//!
//! The pre-training heads are dropped and replaced by a pooling step and a
//! two-layer head (linear, GELU, dropout, linear). Classification trains
//! softmax cross-entropy over the observed labels; regression trains through
//! one of the target codecs.

mod codec;
mod metrics;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use codec::{
    fit_yeo_johnson, yeo_johnson, yeo_johnson_inverse, CodecKind, CodecTarget, FittedCodec, FRACTION_BINS,
    PERCENTILE_BINS,
};
pub use metrics::{accuracy, bag_predictions, mean_squared_error, r2_capped, select_top_n};

use crate::autodiff::{softmax_row, Gradients, Graph, ParamId, ParamStore, Var};
use crate::backbone::{truncated_normal, BackboneParams, ModelConfig, INIT_STD};
use crate::embed::EmbedderHandle;
use crate::encoder::{prepare_row, EncoderParams, TokenSpec};
use crate::error::{Error, Result};
use crate::ingest::{split_train_test, Row, Task};
use crate::model::{hidden_states, PretrainModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::ScheduleConfig;
use crate::tensor::{sc, Matrix, Scalar};
use crate::value::CellValue;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FirstToken,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_token" => Ok(Pooling::FirstToken),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling `{other}` (first_token, mean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub pooling: Pooling,
    pub dropout: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    /// Share of training rows held out for early stopping; 0 monitors the
    /// training rows themselves.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            max_epochs: 100,
            patience: 20,
            pooling: Pooling::FirstToken,
            dropout: 0.1,
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!("patience {} exceeds max epochs {}", self.patience, self.max_epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!("valid fraction {} not in [0, 1)", self.valid_fraction)));
        }
        Ok(())
    }
}

/// What the head predicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskSpec {
    Classification { classes: Vec<String> },
    Regression { codec: FittedCodec },
}

impl TaskSpec {
    pub fn task(&self) -> Task {
        match self {
            TaskSpec::Classification { .. } => Task::Classification,
            TaskSpec::Regression { .. } => Task::Regression,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TaskSpec::Classification { classes } => classes.len(),
            TaskSpec::Regression { codec } => codec.output_dim(),
        }
    }
}

#[derive(Clone, Debug)]
struct TaskHead {
    hidden: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl TaskHead {
    const NAMES: [&'static str; 4] = ["task.hidden.w", "task.hidden.b", "task.out.w", "task.out.b"];

    fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, d: usize, out: usize, rng: &mut R) -> Result<Self> {
        store.insert(Self::NAMES[0], truncated_normal(d, d, INIT_STD, rng))?;
        store.insert(Self::NAMES[1], Matrix::zeros(1, d))?;
        store.insert(Self::NAMES[2], truncated_normal(d, out, INIT_STD, rng))?;
        store.insert(Self::NAMES[3], Matrix::zeros(1, out))?;
        Self::bind(store, d, out)
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, d: usize, out: usize) -> Result<Self> {
        let ids = Self::NAMES.iter().map(|n| store.require(n)).collect::<Result<Vec<_>>>()?;
        let head = TaskHead { hidden: (ids[0], ids[1]), out: (ids[2], ids[3]) };
        if store.get(head.out.0).shape() != (d, out) {
            return Err(Error::Checkpoint(format!("task head has shape {:?}, expected {:?}", store.get(head.out.0).shape(), (d, out))));
        }
        Ok(head)
    }
}

/// A fine-tuned model: encoder, backbone, pooling and task head.
#[derive(Clone, Debug)]
pub struct FinetuneModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub target: String,
    pub spec: TaskSpec,
    pub pooling: Pooling,
    pub head_dropout: f64,
    encoder: EncoderParams,
    backbone: BackboneParams,
    head: TaskHead,
}

impl<T: Scalar> FinetuneModel<T> {
    /// Starts from pre-trained weights (decoding heads dropped) or, when
    /// `pretrained` is `None`, from a fresh initialization.
    pub fn new(
        config: ModelConfig,
        pretrained: Option<&ParamStore<T>>,
        target: String,
        spec: TaskSpec,
        cfg: &FinetuneConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = match pretrained {
            Some(p) => p.without_prefix(crate::heads::PretrainHeads::PREFIX),
            None => {
                let fresh = PretrainModel::<T>::init(config.clone(), rng.random())?;
                fresh.store.without_prefix(crate::heads::PretrainHeads::PREFIX)
            }
        };
        let encoder = EncoderParams::bind(&store, &config)?;
        let backbone = BackboneParams::bind(&store, &config)?;
        let head = TaskHead::register(&mut store, config.hidden, spec.output_dim(), &mut rng)?;
        Ok(FinetuneModel { config, store, target, spec, pooling: cfg.pooling, head_dropout: cfg.dropout, encoder, backbone, head })
    }

    pub fn from_parts(
        config: ModelConfig,
        store: ParamStore<T>,
        target: String,
        spec: TaskSpec,
        pooling: Pooling,
        head_dropout: f64,
    ) -> Result<Self> {
        let encoder = EncoderParams::bind(&store, &config)?;
        let backbone = BackboneParams::bind(&store, &config)?;
        let head = TaskHead::bind(&store, config.hidden, spec.output_dim())?;
        Ok(FinetuneModel { config, store, target, spec, pooling, head_dropout, encoder, backbone, head })
    }

    pub fn task(&self) -> Task {
        self.spec.task()
    }

    /// Head outputs for a batch of prepared rows.
    fn outputs<R: Rng + ?Sized>(&self, g: &mut Graph<'_, T>, rows: &[&[TokenSpec]], mut rng: Option<&mut R>) -> Result<Var> {
        let (hidden, inputs) = hidden_states(g, &self.encoder, &self.backbone, rows, rng.as_deref_mut())?;
        let pooled = pool(g, hidden, &inputs.lengths, inputs.max_len, self.pooling)?;
        let h = g.linear(pooled, self.head.hidden.0, self.head.hidden.1);
        let mut h = g.gelu(h);
        if let Some(r) = rng {
            h = g.dropout(h, self.head_dropout, r);
        }
        Ok(g.linear(h, self.head.out.0, self.head.out.1))
    }

    fn raw_outputs(&self, rows: &[&[TokenSpec]]) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.store);
        let out = self.outputs(&mut g, rows, None::<&mut ChaCha8Rng>)?;
        Ok(g.value(out).clone())
    }
}

/// Reduces each padded row group to one vector.
pub fn pool<T: Scalar>(g: &mut Graph<'_, T>, x: Var, lengths: &[usize], max_len: usize, mode: Pooling) -> Result<Var> {
    if lengths.contains(&0) {
        return Err(Error::EmptyRow);
    }
    Ok(match mode {
        Pooling::FirstToken => {
            let idx: Vec<usize> = (0..lengths.len()).map(|b| b * max_len).collect();
            g.gather_rows(x, &idx)
        }
        Pooling::Mean => g.segment_mean(x, lengths, max_len),
    })
}

/// Model outputs for a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Predictions {
    Classification { classes: Vec<String>, probabilities: Vec<Vec<f64>> },
    Regression(Vec<f64>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Classification { probabilities, .. } => probabilities.len(),
            Predictions::Regression(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predicted class indices (classification only).
    pub fn labels(&self) -> Option<Vec<usize>> {
        match self {
            Predictions::Classification { probabilities, .. } => {
                Some(probabilities.iter().map(|p| crate::heads::argmax(p)).collect())
            }
            Predictions::Regression(_) => None,
        }
    }
}

/// A labelled example: prepared features plus the raw target cell.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Vec<TokenSpec>,
    pub target: CellValue,
}

pub fn prepare_examples(rows: &[Row], target: &str, embedder: &EmbedderHandle, bins: usize) -> Result<Vec<Example>> {
    rows.iter()
        .filter(|r| r.get(target).is_some_and(|v| !v.is_missing()))
        .map(|r| {
            Ok(Example { features: prepare_row(&r.without(target), embedder, bins)?, target: r.get(target).cloned().unwrap() })
        })
        .collect()
}

fn regression_value(v: &CellValue) -> Result<f64> {
    match v {
        CellValue::Number(x) => Ok(*x),
        other => Err(Error::invalid(format!("regression target must be numeric, found {other:?}"))),
    }
}

/// Builds the task description from the training targets: the sorted label
/// set for classification, a fitted codec for regression.
pub fn fit_task(task: Task, targets: &[CellValue], codec: CodecKind) -> Result<TaskSpec> {
    match task {
        Task::Classification => {
            let mut classes: Vec<String> = targets.iter().map(CellValue::render).collect();
            classes.sort();
            classes.dedup();
            Ok(TaskSpec::Classification { classes })
        }
        Task::Regression => {
            let ys = targets.iter().map(regression_value).collect::<Result<Vec<_>>>()?;
            Ok(TaskSpec::Regression { codec: FittedCodec::fit(codec, &ys)? })
        }
    }
}

enum Targets {
    Classes(Vec<usize>),
    Codec(Vec<CodecTarget>),
}

fn encode_targets(spec: &TaskSpec, examples: &[&Example]) -> Result<Targets> {
    match spec {
        TaskSpec::Classification { classes } => Ok(Targets::Classes(
            examples
                .iter()
                .map(|e| {
                    let label = e.target.render();
                    classes.iter().position(|c| *c == label).ok_or_else(|| Error::invalid(format!("unseen label `{label}`")))
                })
                .collect::<Result<_>>()?,
        )),
        TaskSpec::Regression { codec } => Ok(Targets::Codec(
            examples.iter().map(|e| codec.encode(regression_value(&e.target)?)).collect::<Result<_>>()?,
        )),
    }
}

fn task_loss<T: Scalar>(g: &mut Graph<'_, T>, spec: &TaskSpec, out: Var, targets: &Targets, norm: T) -> Result<Var> {
    match (spec, targets) {
        (TaskSpec::Classification { .. }, Targets::Classes(c)) => Ok(g.cross_entropy(out, c, norm)),
        (TaskSpec::Regression { codec }, Targets::Codec(t)) => codec.loss(g, out, t, norm),
        _ => Err(Error::invalid("targets do not match the task")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Accuracy for classification, capped R² for regression.
    pub valid_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }
}

/// Loss and metric of `model` on `examples`, without dropout.
pub fn evaluate<T: Scalar>(model: &FinetuneModel<T>, examples: &[Example]) -> Result<(f64, f64)> {
    let refs: Vec<&Example> = examples.iter().collect();
    let mut total = 0.0;
    let norm = sc::<T>(examples.len() as f64);
    let mut preds_all = Vec::new();
    for chunk in refs.chunks(256) {
        let rows: Vec<&[TokenSpec]> = chunk.iter().map(|e| e.features.as_slice()).collect();
        let mut g = Graph::new(&model.store);
        let out = model.outputs(&mut g, &rows, None::<&mut ChaCha8Rng>)?;
        let targets = encode_targets(&model.spec, chunk)?;
        let l = task_loss(&mut g, &model.spec, out, &targets, norm)?;
        total += g.value(l).item().to_f64().unwrap_or(f64::NAN);
        preds_all.push(decode_outputs(&model.spec, g.value(out)));
    }
    let metric = match &model.spec {
        TaskSpec::Classification { classes } => {
            let labels = match encode_targets(&model.spec, &refs)? {
                Targets::Classes(c) => c,
                Targets::Codec(_) => unreachable!(),
            };
            let predicted: Vec<usize> =
                preds_all.iter().flat_map(|p| p.labels().unwrap_or_default()).collect();
            let _ = classes;
            accuracy(&predicted, &labels)?
        }
        TaskSpec::Regression { .. } => {
            let ys = examples.iter().map(|e| regression_value(&e.target)).collect::<Result<Vec<_>>>()?;
            let preds: Vec<f64> = preds_all
                .into_iter()
                .flat_map(|p| match p {
                    Predictions::Regression(v) => v,
                    Predictions::Classification { .. } => vec![],
                })
                .collect();
            r2_capped(&preds, &ys).unwrap_or(0.0)
        }
    };
    Ok((total, metric))
}

fn decode_outputs<T: Scalar>(spec: &TaskSpec, out: &Matrix<T>) -> Predictions {
    let rows = (0..out.rows()).map(|r| out.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>());
    match spec {
        TaskSpec::Classification { classes } => {
            Predictions::Classification { classes: classes.clone(), probabilities: rows.map(|r| softmax_row(&r)).collect() }
        }
        TaskSpec::Regression { codec } => Predictions::Regression(rows.map(|r| codec.decode(&r)).collect()),
    }
}

/// Trains `model` on `train`, monitoring `valid` for early stopping, and
/// restores the weights of the best validation epoch.
pub fn finetune<T: Scalar>(
    model: &mut FinetuneModel<T>,
    train: &[Example],
    valid: &[Example],
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("fine-tuning needs non-empty train and validation sets"));
    }
    let batches = train.len().div_ceil(cfg.batch_size);
    let schedule = ScheduleConfig::triangular(cfg.peak_lr, cfg.warmup_fraction, batches * cfg.max_epochs);
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classification = model.task() == Task::Classification;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History { epochs: Vec::new(), best_epoch: 0 };
    let mut best_store = model.store.clone();
    let mut update = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let rows: Vec<&[TokenSpec]> = batch.iter().map(|e| e.features.as_slice()).collect();
            let targets = encode_targets(&model.spec, &batch)?;
            let grads: Gradients<T> = {
                let mut g = Graph::new(&model.store);
                let out = model.outputs(&mut g, &rows, Some(&mut rng))?;
                let loss = task_loss(&mut g, &model.spec, out, &targets, sc::<T>(batch.len() as f64))?;
                let l = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
                if !l.is_finite() {
                    return Err(Error::Divergence(format!("non-finite fine-tuning loss at epoch {epoch}")));
                }
                train_loss += l * batch.len() as f64;
                g.backward(loss)?
            };
            opt.step(&mut model.store, &grads, schedule.for_update(update))?;
            update += 1;
        }
        let (valid_loss, valid_metric) = evaluate(model, valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord { epoch, train_loss: train_loss / train.len() as f64, valid_loss, valid_metric };
        on_epoch(&record);
        history.epochs.push(record);
        let best = history.best();
        let improved = epoch == 0
            || if classification { valid_metric > best.valid_metric } else { valid_loss < best.valid_loss };
        if improved {
            history.best_epoch = epoch;
            best_store = model.store.clone();
        } else if epoch - history.best_epoch > cfg.patience {
            break;
        }
        if !classification && valid_loss == 0.0 {
            break;
        }
    }
    model.store = best_store;
    Ok(history)
}

/// Splits labelled rows into train and early-stopping validation parts.
pub fn validation_split(examples: Vec<Example>, valid_fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if valid_fraction == 0.0 || examples.len() < 2 {
        let v = examples.clone();
        return Ok((examples, v));
    }
    split_train_test(&examples, 1.0 - valid_fraction, seed)
}

pub fn predict<T: Scalar>(model: &FinetuneModel<T>, rows: &[Row], embedder: &EmbedderHandle) -> Result<Predictions> {
    let specs = rows
        .iter()
        .map(|r| prepare_row(&r.without(&model.target), embedder, model.config.bins))
        .collect::<Result<Vec<_>>>()?;
    predict_prepared(model, &specs)
}

pub fn predict_prepared<T: Scalar>(model: &FinetuneModel<T>, rows: &[Vec<TokenSpec>]) -> Result<Predictions> {
    let mut out: Option<Predictions> = None;
    for chunk in rows.chunks(256) {
        let refs: Vec<&[TokenSpec]> = chunk.iter().map(Vec::as_slice).collect();
        let part = decode_outputs(&model.spec, &model.raw_outputs(&refs)?);
        out = Some(match (out, part) {
            (None, p) => p,
            (Some(Predictions::Regression(mut a)), Predictions::Regression(b)) => {
                a.extend(b);
                Predictions::Regression(a)
            }
            (
                Some(Predictions::Classification { classes, probabilities: mut a }),
                Predictions::Classification { probabilities: b, .. },
            ) => {
                a.extend(b);
                Predictions::Classification { classes, probabilities: a }
            }
            _ => unreachable!("one task per model"),
        });
    }
    Ok(out.unwrap_or_else(|| decode_outputs(&model.spec, &Matrix::<T>::zeros(0, model.spec.output_dim()))))
}
