//! Run configuration: a plain `key = value` file covering the model, the
//! pre-training and fine-tuning schedules, the codec, the embedder and the
//! seed. Command-line flags are applied on top with the same keys.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::embed::{EmbedderHandle, EmbedderKind, DEFAULT_TEXT_DIM};
use crate::error::{Error, Result};
use crate::finetune::{CodecKind, FinetuneConfig, Pooling};
use crate::pretrain::PretrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// Architecture overrides; any set value turns the preset into a custom
    /// configuration.
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub text_dim: usize,
    pub pretrain: PretrainConfig,
    /// Rows held out (one per table) for pre-training validation.
    pub validation_tables: usize,
    pub finetune: FinetuneConfig,
    pub codec: CodecKind,
    pub embedder: EmbedderKind,
    pub sidecar: Option<String>,
    pub embed_cache: Option<String>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "mini".into(),
            layers: None,
            hidden: None,
            heads: None,
            dropout: None,
            text_dim: DEFAULT_TEXT_DIM,
            pretrain: PretrainConfig::default(),
            validation_tables: 0,
            finetune: FinetuneConfig::default(),
            codec: CodecKind::ScalarL2,
            embedder: EmbedderKind::Fallback,
            sidecar: None,
            embed_cache: None,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_string(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

fn show<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: [&'static str; 38] = [
        "preset",
        "layers",
        "hidden",
        "heads",
        "dropout",
        "text_dim",
        "pretrain.epochs",
        "pretrain.batch_size",
        "pretrain.micro_batch",
        "pretrain.peak_lr",
        "pretrain.warmup_fraction",
        "pretrain.mask_probability",
        "pretrain.validation_interval",
        "pretrain.validation_tables",
        "loss.day",
        "loss.month",
        "loss.year",
        "loss.sign",
        "loss.fraction",
        "loss.exponent",
        "loss.text",
        "optim.beta1",
        "optim.beta2",
        "optim.eps",
        "optim.weight_decay",
        "finetune.max_epochs",
        "finetune.patience",
        "finetune.pooling",
        "finetune.dropout",
        "finetune.batch_size",
        "finetune.peak_lr",
        "finetune.warmup_fraction",
        "finetune.valid_fraction",
        "codec",
        "embedder",
        "sidecar",
        "embed_cache",
        "seed",
    ];

    /// Parses a config file body. Blank lines and `#` comments are ignored;
    /// unknown keys and repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pretrain;
        let f = &mut self.finetune;
        match key {
            "preset" => {
                ModelConfig::preset(value)?;
                self.preset = value.to_string();
            }
            "layers" => self.layers = parse_opt(key, value)?,
            "hidden" => self.hidden = parse_opt(key, value)?,
            "heads" => self.heads = parse_opt(key, value)?,
            "dropout" => self.dropout = parse_opt(key, value)?,
            "text_dim" => self.text_dim = parse(key, value)?,
            "pretrain.epochs" => p.epochs = parse(key, value)?,
            "pretrain.batch_size" => p.batch_size = parse(key, value)?,
            "pretrain.micro_batch" => p.micro_batch = parse(key, value)?,
            "pretrain.peak_lr" => p.peak_lr = parse(key, value)?,
            "pretrain.warmup_fraction" => p.warmup_fraction = parse(key, value)?,
            "pretrain.mask_probability" => p.mask_probability = parse(key, value)?,
            "pretrain.validation_interval" => p.validation_interval = parse(key, value)?,
            "pretrain.validation_tables" => self.validation_tables = parse(key, value)?,
            "loss.day" => p.weights.day = parse(key, value)?,
            "loss.month" => p.weights.month = parse(key, value)?,
            "loss.year" => p.weights.year = parse(key, value)?,
            "loss.sign" => p.weights.sign = parse(key, value)?,
            "loss.fraction" => p.weights.fraction = parse(key, value)?,
            "loss.exponent" => p.weights.exponent = parse(key, value)?,
            "loss.text" => p.weights.text = parse(key, value)?,
            "optim.beta1" => set_both(p, f, |o| &mut o.beta1, parse(key, value)?),
            "optim.beta2" => set_both(p, f, |o| &mut o.beta2, parse(key, value)?),
            "optim.eps" => set_both(p, f, |o| &mut o.eps, parse(key, value)?),
            "optim.weight_decay" => set_both(p, f, |o| &mut o.weight_decay, parse(key, value)?),
            "finetune.max_epochs" => f.max_epochs = parse(key, value)?,
            "finetune.patience" => f.patience = parse(key, value)?,
            "finetune.pooling" => f.pooling = value.parse::<Pooling>()?,
            "finetune.dropout" => f.dropout = parse(key, value)?,
            "finetune.batch_size" => f.batch_size = parse(key, value)?,
            "finetune.peak_lr" => f.peak_lr = parse(key, value)?,
            "finetune.warmup_fraction" => f.warmup_fraction = parse(key, value)?,
            "finetune.valid_fraction" => f.valid_fraction = parse(key, value)?,
            "codec" => self.codec = value.parse::<CodecKind>()?,
            "embedder" => {
                self.embedder = match value {
                    "fallback" => EmbedderKind::Fallback,
                    "sidecar" => EmbedderKind::Sidecar,
                    "file-cache" => EmbedderKind::FileCache,
                    other => {
                        return Err(Error::Config(format!("unknown embedder `{other}` (fallback, sidecar, file-cache)")))
                    }
                }
            }
            "sidecar" => self.sidecar = opt_string(value),
            "embed_cache" => self.embed_cache = opt_string(value),
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.pretrain;
        let f = &self.finetune;
        let embedder = match self.embedder {
            EmbedderKind::Fallback => "fallback",
            EmbedderKind::Sidecar => "sidecar",
            EmbedderKind::FileCache => "file-cache",
        };
        let pooling = match f.pooling {
            Pooling::FirstToken => "first_token",
            Pooling::Mean => "mean",
        };
        vec![
            ("preset", self.preset.clone()),
            ("layers", show(&self.layers)),
            ("hidden", show(&self.hidden)),
            ("heads", show(&self.heads)),
            ("dropout", show(&self.dropout)),
            ("text_dim", self.text_dim.to_string()),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.micro_batch", p.micro_batch.to_string()),
            ("pretrain.peak_lr", p.peak_lr.to_string()),
            ("pretrain.warmup_fraction", p.warmup_fraction.to_string()),
            ("pretrain.mask_probability", p.mask_probability.to_string()),
            ("pretrain.validation_interval", p.validation_interval.to_string()),
            ("pretrain.validation_tables", self.validation_tables.to_string()),
            ("loss.day", p.weights.day.to_string()),
            ("loss.month", p.weights.month.to_string()),
            ("loss.year", p.weights.year.to_string()),
            ("loss.sign", p.weights.sign.to_string()),
            ("loss.fraction", p.weights.fraction.to_string()),
            ("loss.exponent", p.weights.exponent.to_string()),
            ("loss.text", p.weights.text.to_string()),
            ("optim.beta1", p.optimizer.beta1.to_string()),
            ("optim.beta2", p.optimizer.beta2.to_string()),
            ("optim.eps", p.optimizer.eps.to_string()),
            ("optim.weight_decay", p.optimizer.weight_decay.to_string()),
            ("finetune.max_epochs", f.max_epochs.to_string()),
            ("finetune.patience", f.patience.to_string()),
            ("finetune.pooling", pooling.to_string()),
            ("finetune.dropout", f.dropout.to_string()),
            ("finetune.batch_size", f.batch_size.to_string()),
            ("finetune.peak_lr", f.peak_lr.to_string()),
            ("finetune.warmup_fraction", f.warmup_fraction.to_string()),
            ("finetune.valid_fraction", f.valid_fraction.to_string()),
            ("codec", self.codec.name().to_string()),
            ("embedder", embedder.to_string()),
            ("sidecar", show(&self.sidecar)),
            ("embed_cache", show(&self.embed_cache)),
            ("seed", self.seed.to_string()),
        ]
    }

    /// The resolved configuration in config-file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Propagates the run seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.model()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(self)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.preset)?;
        if self.layers.is_some() || self.hidden.is_some() || self.heads.is_some() {
            let hidden = self.hidden.unwrap_or(m.hidden);
            m = ModelConfig { dropout: m.dropout, ..ModelConfig::custom(self.layers.unwrap_or(m.layers), hidden, self.heads.unwrap_or(hidden / 64).max(1)) };
        }
        if let Some(d) = self.dropout {
            m.dropout = d;
        }
        m.text_dim = self.text_dim;
        m.validate()?;
        Ok(m)
    }

    pub fn build_embedder(&self) -> Result<EmbedderHandle> {
        let handle = match self.embedder {
            EmbedderKind::Fallback => EmbedderHandle::fallback(self.text_dim),
            EmbedderKind::Sidecar => {
                let cmd = self.sidecar.as_deref().ok_or_else(|| Error::Config("embedder = sidecar needs `sidecar`".into()))?;
                EmbedderHandle::spawn_sidecar(cmd, Some(self.text_dim))?
            }
            EmbedderKind::FileCache => {
                let path =
                    self.embed_cache.as_deref().ok_or_else(|| Error::Config("embedder = file-cache needs `embed_cache`".into()))?;
                EmbedderHandle::file_cache(Path::new(path), true)?
            }
        };
        if handle.dim() != self.text_dim {
            return Err(Error::EmbedConfig(format!("embedder dim {} but text_dim is {}", handle.dim(), self.text_dim)));
        }
        Ok(handle)
    }
}

fn set_both(
    p: &mut PretrainConfig,
    f: &mut FinetuneConfig,
    field: impl Fn(&mut crate::optim::AdamWConfig) -> &mut f64,
    value: f64,
) {
    *field(&mut p.optimizer) = value;
    *field(&mut f.optimizer) = value;
}
