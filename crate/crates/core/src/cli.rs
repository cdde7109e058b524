//! The `portal` command line: pre-train, fine-tune, evaluate, inspect value
//! encodings and build embedding caches.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{Checkpoint, EmbedderInfo};
use crate::config::RunConfig;
use crate::embed::EmbedderHandle;
use crate::encoder::inspect_value;
use crate::error::{Error, Result};
use crate::finetune::{self, FinetuneModel, Predictions, TaskSpec};
use crate::ingest::{load_table_dir, ColumnType, Table, Task};
use crate::model::PretrainModel;
use crate::pretrain::{self, write_metrics_line, ValidationSet};

#[derive(Debug, Parser)]
#[command(name = "portal", version, about = "Row-level tabular transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-cell pre-training on a directory of tables.
    Pretrain(PretrainArgs),
    /// Fine-tune on a labelled table, optionally from a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate one or more fine-tuned checkpoints on a table.
    Eval(EvalArgs),
    /// Print the encoding features of a single value as JSON.
    Inspect(InspectArgs),
    /// Embed texts and write them to an embedding cache file.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shell command that starts an embedding sidecar.
    #[arg(long)]
    pub sidecar: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines metrics log; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub target: String,
    /// `classification` (or `cls`) / `regression` (or `reg`).
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    /// Pre-trained checkpoint; omitted means random initialization.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub codec: Option<String>,
    /// Train this many members with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub bag: usize,
    /// Average only the best `n` members by validation metric.
    #[arg(long)]
    pub top: Option<usize>,
    /// Metrics JSON; defaults to `<out>.metrics.json`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fine-tuned checkpoint; repeat to evaluate a bagged ensemble.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Predictions CSV: row index, prediction and class probabilities.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub sidecar: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub value: String,
    #[arg(long = "type", value_parser = parse_column_type)]
    pub column_type: ColumnType,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[arg(long, default_value_t = crate::embed::DEFAULT_TEXT_DIM)]
    pub text_dim: usize,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// File with one text per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sidecar: Option<String>,
    #[arg(long, default_value_t = crate::embed::DEFAULT_TEXT_DIM)]
    pub dim: usize,
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "classification" | "cls" => Ok(Task::Classification),
        "regression" | "reg" => Ok(Task::Regression),
        other => Err(format!("unknown task `{other}` (classification, regression)")),
    }
}

fn parse_column_type(s: &str) -> std::result::Result<ColumnType, String> {
    match s {
        "number" => Ok(ColumnType::Number),
        "date" => Ok(ColumnType::Date),
        "text" => Ok(ColumnType::Text),
        other => Err(format!("unknown type `{other}` (number, date, text)")),
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Divergence(_) | Error::CodecFailure(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// exit code. Diagnostics go to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Embed(a) => cmd_embed(&a),
    }
}

fn resolve_config(common: &CommonArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(cmd) = &common.sidecar {
        cfg.set("embedder", "sidecar")?;
        cfg.sidecar = Some(cmd.clone());
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    let cfg = cfg.resolve()?;
    eprintln!("# resolved config\n{}", cfg.to_text());
    Ok(cfg)
}

fn config_record(cfg: &RunConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> =
        cfg.entries().into_iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v))).collect();
    json!({ "config": map })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn embedder_info(e: &EmbedderHandle) -> EmbedderInfo {
    EmbedderInfo { kind: e.kind(), dim: e.dim() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.common, &[])?;
    let tables = load_table_dir(&a.data)?;
    let embedder = cfg.build_embedder()?;
    let mut model = PretrainModel::<f32>::init(cfg.model()?, cfg.seed)?;
    let (train, validation) = ValidationSet::hold_out(&tables, cfg.validation_tables);
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"));
    let mut log = BufWriter::new(fs::File::create(&metrics_path)?);
    let val = (!validation.is_empty()).then_some(&validation);
    pretrain::pretrain(&mut model, &train, &embedder, &cfg.pretrain, val, |m| {
        write_metrics_line(&mut log, m)?;
        log.flush()?;
        eprintln!("epoch {} loss {:.5} lr {:.3e}{}", m.epoch, m.loss.total, m.lr, m.validation.map_or(String::new(), |v| format!(" rank {v:.4}")));
        Ok(())
    })?;
    Checkpoint::from_pretrain(&model, embedder_info(&embedder), config_record(&cfg)).save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// Path of bag member `i` for an ensemble written to `out`.
pub fn member_path(out: &Path, i: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.member-{i:02}.{ext}"),
        None => format!("{stem}.member-{i:02}"),
    };
    out.with_file_name(name)
}

#[derive(Debug, Serialize)]
struct MemberReport {
    seed: u64,
    checkpoint: String,
    best_epoch: usize,
    epochs_run: usize,
    valid_loss: f64,
    valid_metric: f64,
    train_metric: Option<f64>,
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "accuracy",
        Task::Regression => "r2",
    }
}

/// Accuracy or capped R² of `preds` against the targets of `rows`, when
/// every row has a usable target.
fn score(spec: &TaskSpec, preds: &Predictions, targets: &[crate::value::CellValue]) -> Result<Option<f64>> {
    if targets.iter().any(|t| t.is_missing()) || targets.len() < 2 {
        return Ok(None);
    }
    match (spec, preds) {
        (TaskSpec::Classification { classes }, p) => {
            let labels: Vec<usize> = targets
                .iter()
                .map(|t| classes.iter().position(|c| *c == t.render()).unwrap_or(usize::MAX))
                .collect();
            Ok(Some(finetune::accuracy(&p.labels().unwrap_or_default(), &labels)?))
        }
        (TaskSpec::Regression { .. }, Predictions::Regression(v)) => {
            let ys: Vec<f64> = targets.iter().map(|t| t.as_number().unwrap_or(f64::NAN)).collect();
            if ys.iter().any(|y| !y.is_finite()) {
                return Ok(None);
            }
            match finetune::r2_capped(v, &ys) {
                Ok(r) => Ok(Some(r)),
                Err(Error::ConstantTarget) => Ok(None),
                Err(e) => Err(e),
            }
        }
        _ => Err(Error::invalid("predictions do not match the task")),
    }
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    if a.bag == 0 {
        return Err(Error::Config("--bag must be at least 1".into()));
    }
    let mut extra = Vec::new();
    if let Some(c) = &a.codec {
        extra.push(("codec", c.clone()));
    }
    let cfg = resolve_config(&a.common, &extra)?;
    let table = Table::from_path(&a.train)?;
    let column = table
        .manifest
        .column_type(&a.target)
        .ok_or_else(|| Error::Manifest(format!("target column `{}` not found in {}", a.target, a.train.display())))?;
    if let (Some(t), Some(declared)) = (&table.manifest.target, table.manifest.task) {
        if *t == a.target && declared != a.task {
            return Err(Error::Manifest(format!("manifest declares `{t}` as a {declared:?} target, not {:?}", a.task)));
        }
    }
    if a.task == Task::Regression && column != ColumnType::Number {
        return Err(Error::Manifest(format!("regression target `{}` is a {column} column", a.target)));
    }
    let manifest = table.manifest.clone().with_target(&a.target, a.task)?;

    let pretrained = a.from.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let model_config = match &pretrained {
        Some(ck) => ck.meta.model.clone(),
        None => cfg.model()?,
    };
    let embedder = cfg.build_embedder()?;
    if embedder.dim() != model_config.text_dim {
        return Err(Error::EmbedConfig(format!(
            "embedder dim {} but the model expects {}",
            embedder.dim(),
            model_config.text_dim
        )));
    }
    let backbone = pretrained.as_ref().map(|ck| ck.backbone_store::<f32>());
    let examples = finetune::prepare_examples(&table.rows, &a.target, &embedder, model_config.bins)?;
    if examples.len() < 2 {
        return Err(Error::invalid("fine-tuning needs at least two labelled rows"));
    }
    let all_targets: Vec<_> = examples.iter().map(|e| e.target.clone()).collect();
    let all_features: Vec<_> = examples.iter().map(|e| e.features.clone()).collect();

    let members: Vec<Result<(FinetuneModel<f32>, finetune::History, u64)>> = (0..a.bag as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed + i;
            let (train, valid) = finetune::validation_split(examples.clone(), cfg.finetune.valid_fraction, seed)?;
            let targets: Vec<_> = train.iter().map(|e| e.target.clone()).collect();
            let spec = finetune::fit_task(a.task, &targets, cfg.codec)?;
            let fc = finetune::FinetuneConfig { seed, ..cfg.finetune.clone() };
            let mut model = FinetuneModel::new(model_config.clone(), backbone.as_ref(), a.target.clone(), spec, &fc, seed)?;
            let history = finetune::finetune(&mut model, &train, &valid, &fc, |_| {})?;
            Ok((model, history, seed))
        })
        .collect();

    let mut reports = Vec::new();
    let mut member_preds = Vec::new();
    for (i, m) in members.into_iter().enumerate() {
        let (model, history, seed) = m?;
        let path = if a.bag == 1 { a.out.clone() } else { member_path(&a.out, i) };
        let mut run = config_record(&cfg);
        run["seed"] = json!(seed);
        Checkpoint::from_finetune(&model, manifest.clone(), embedder_info(&embedder), run).save(&path)?;
        let preds = finetune::predict_prepared(&model, &all_features)?;
        let best = history.best();
        reports.push(MemberReport {
            seed,
            checkpoint: path.display().to_string(),
            best_epoch: best.epoch,
            epochs_run: history.epochs.len(),
            valid_loss: best.valid_loss,
            valid_metric: best.valid_metric,
            train_metric: score(&model.spec, &preds, &all_targets)?,
        });
        eprintln!("member {i} seed {seed}: best epoch {} valid {} {:.4}", best.epoch, metric_name(a.task), best.valid_metric);
        member_preds.push((model.spec.clone(), preds));
    }

    let scores: Vec<f64> = reports.iter().map(|r| r.valid_metric).collect();
    let selected = finetune::select_top_n(&scores, a.top.unwrap_or(a.bag));
    let chosen: Vec<Predictions> = selected.iter().map(|&i| member_preds[i].1.clone()).collect();
    let ensemble = finetune::bag_predictions(&chosen)?;
    let ensemble_metric = score(&member_preds[0].0, &ensemble, &all_targets)?;
    let report = json!({
        "task": a.task,
        "target": a.target,
        "metric": metric_name(a.task),
        "members": reports,
        "selected": selected,
        "ensemble": { "train_metric": ensemble_metric },
    });
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.json"));
    write_json(&metrics_path, &report)?;
    eprintln!("wrote {}", metrics_path.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut models = Vec::new();
    let mut manifest = None;
    let mut info = None;
    for p in &a.models {
        let ck = Checkpoint::load(p)?;
        let e = ck.meta.embedder.clone();
        let (model, task) = ck.into_finetune::<f32>()?;
        if let Some(m) = &manifest {
            if *m != task.manifest {
                return Err(Error::Manifest(format!("{} was trained on a different table layout", p.display())));
            }
        }
        manifest = Some(task.manifest);
        info = Some(e);
        models.push(model);
    }
    let manifest = manifest.expect("at least one model");
    let info = info.expect("at least one model");
    let embedder = match &a.sidecar {
        Some(cmd) => EmbedderHandle::spawn_sidecar(cmd, Some(info.dim))?,
        None => EmbedderHandle::fallback(info.dim),
    };
    let table = Table::from_path_with_manifest(&a.test, &manifest)?;
    let target = &models[0].target;
    let targets: Vec<_> = table.rows.iter().map(|r| r.get(target).cloned().unwrap_or(crate::value::CellValue::Missing)).collect();
    let mut member_preds = Vec::new();
    let mut member_scores = Vec::new();
    for m in &models {
        let p = finetune::predict(m, &table.rows, &embedder)?;
        member_scores.push(score(&m.spec, &p, &targets)?);
        member_preds.push(p);
    }
    let ensemble = finetune::bag_predictions(&member_preds)?;
    let spec = &models[0].spec;
    let value = score(spec, &ensemble, &targets)?;
    let metric = metric_name(spec.task());
    match value {
        Some(v) => say!("{metric} {v:.6}"),
        None => say!("{metric} unavailable (targets missing or constant)"),
    }
    if let Some(path) = &a.metrics {
        write_json(
            path,
            &json!({ "task": spec.task(), "metric": metric, "rows": table.rows.len(), "members": member_scores, "ensemble": value }),
        )?;
    }
    if let Some(path) = &a.predictions {
        write_predictions(path, &ensemble)?;
    }
    Ok(())
}

pub fn write_predictions(path: &Path, preds: &Predictions) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    match preds {
        Predictions::Regression(v) => {
            w.write_record(["row", "prediction"]).map_err(csv_error)?;
            for (i, y) in v.iter().enumerate() {
                w.write_record([i.to_string(), format!("{y:?}")]).map_err(csv_error)?;
            }
        }
        Predictions::Classification { classes, probabilities } => {
            let mut header = vec!["row".to_string(), "prediction".to_string()];
            header.extend(classes.iter().map(|c| format!("p_{c}")));
            w.write_record(&header).map_err(csv_error)?;
            for (i, p) in probabilities.iter().enumerate() {
                let mut rec = vec![i.to_string(), classes[crate::heads::argmax(p)].clone()];
                rec.extend(p.iter().map(|x| format!("{x:?}")));
                w.write_record(&rec).map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let embedder = EmbedderHandle::fallback(a.text_dim);
    let inspection = inspect_value(&a.value, a.column_type, a.bins, &embedder)?;
    say!("{}", serde_json::to_string_pretty(&inspection)?);
    Ok(())
}

pub fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let embedder = match &a.sidecar {
        Some(cmd) => EmbedderHandle::spawn_sidecar(cmd, Some(a.dim))?,
        None => EmbedderHandle::fallback(a.dim),
    };
    let file = fs::File::open(&a.input)?;
    let texts: Vec<String> = std::io::BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect();
    for chunk in texts.chunks(256) {
        embedder.embed_text(chunk)?;
    }
    let n = embedder.export_cache(&a.out)?;
    eprintln!("wrote {n} embeddings to {}", a.out.display());
    Ok(())
}
