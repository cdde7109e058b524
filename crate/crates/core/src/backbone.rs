//! Transformer encoder without positional encodings or a CLS token.
//!
//! Layers are pre-norm with a GELU feed-forward block. A final layer norm is
//! applied when the stack is non-empty, so a zero-layer backbone is the
//! identity.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::encoder::date::HOLIDAY_REGIONS;
use crate::error::{Error, Result};
use crate::tensor::{sc, Matrix, Scalar};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    /// Soft-binning resolution of the numeric fraction.
    pub bins: usize,
    /// Text embedding dimension.
    pub text_dim: usize,
}

impl ModelConfig {
    /// BERT-style size presets; heads are `hidden / 64`.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, hidden) = match name {
            "mini" => (4, 256),
            "small" => (4, 512),
            "medium" => (8, 512),
            "base" => (12, 768),
            "large" => (24, 1024),
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        Ok(ModelConfig {
            preset: name.to_string(),
            layers,
            hidden,
            heads: hidden / 64,
            ffn: 4 * hidden,
            dropout: 0.1,
            bins: 32,
            text_dim: crate::embed::DEFAULT_TEXT_DIM,
        })
    }

    pub fn custom(layers: usize, hidden: usize, heads: usize) -> Self {
        ModelConfig {
            preset: "custom".into(),
            layers,
            hidden,
            heads,
            ffn: 4 * hidden,
            dropout: 0.0,
            bins: 32,
            text_dim: crate::embed::DEFAULT_TEXT_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads)));
        }
        if self.bins < 2 {
            return Err(Error::Config("bins must be at least 2".into()));
        }
        if self.text_dim == 0 || self.ffn == 0 {
            return Err(Error::Config("text_dim and ffn must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn holiday_regions(&self) -> usize {
        HOLIDAY_REGIONS.len()
    }
}

pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 * std {
                break sc::<T>(z);
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Padded batch of token rows: row `b` occupies positions
/// `b * max_len .. b * max_len + lengths[b]`; the rest is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T> {
    pub tokens: Matrix<T>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn from_sequences(seqs: &[Matrix<T>]) -> Result<Self> {
        let d = seqs.first().map_or(0, Matrix::cols);
        let max_len = seqs.iter().map(Matrix::rows).max().unwrap_or(0);
        let mut tokens = Matrix::zeros(seqs.len() * max_len, d);
        for (b, s) in seqs.iter().enumerate() {
            if s.cols() != d {
                return Err(Error::shape("sequences disagree on token width"));
            }
            for i in 0..s.rows() {
                tokens.row_mut(b * max_len + i).copy_from_slice(s.row(i));
            }
        }
        Ok(TokenBatch { tokens, lengths: seqs.iter().map(Matrix::rows).collect(), max_len })
    }

    /// The valid (non-padding) tokens of row `b`.
    pub fn sequence(&self, b: usize) -> Matrix<T> {
        let d = self.tokens.cols();
        let start = b * self.max_len * d;
        Matrix::from_vec(self.lengths[b], d, self.tokens.data()[start..start + self.lengths[b] * d].to_vec())
    }

    pub fn valid_positions(&self) -> Vec<usize> {
        self.lengths.iter().enumerate().flat_map(|(b, &len)| (0..len).map(move |i| b * self.max_len + i)).collect()
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    layers: Vec<LayerParams>,
    final_ln: Option<(ParamId, ParamId)>,
    heads: usize,
    hidden: usize,
    dropout: f64,
}

fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

fn norm_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.g"), format!("{prefix}.b"))
}

impl BackboneParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let mut linear = |store: &mut ParamStore<T>, prefix: String, fan_in: usize, fan_out: usize| -> Result<(ParamId, ParamId)> {
            let (w, b) = linear_names(&prefix);
            Ok((store.insert(w, truncated_normal(fan_in, fan_out, INIT_STD, rng))?, store.insert(b, Matrix::zeros(1, fan_out))?))
        };
        let norm = |store: &mut ParamStore<T>, prefix: String| -> Result<(ParamId, ParamId)> {
            let (g, b) = norm_names(&prefix);
            Ok((store.insert(g, Matrix::filled(1, d, T::one()))?, store.insert(b, Matrix::zeros(1, d))?))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("backbone.{l}");
            layers.push(LayerParams {
                ln1: norm(store, format!("{p}.ln1"))?,
                wq: linear(store, format!("{p}.attn.q"), d, d)?,
                wk: linear(store, format!("{p}.attn.k"), d, d)?,
                wv: linear(store, format!("{p}.attn.v"), d, d)?,
                wo: linear(store, format!("{p}.attn.o"), d, d)?,
                ln2: norm(store, format!("{p}.ln2"))?,
                ff1: linear(store, format!("{p}.ffn.1"), d, cfg.ffn)?,
                ff2: linear(store, format!("{p}.ffn.2"), cfg.ffn, d)?,
            });
        }
        let final_ln = if cfg.layers > 0 { Some(norm(store, "backbone.final_ln".into())?) } else { None };
        Ok(BackboneParams { layers, final_ln, heads: cfg.heads, hidden: d, dropout: cfg.dropout })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let pair = |(a, b): (String, String)| -> Result<(ParamId, ParamId)> { Ok((store.require(&a)?, store.require(&b)?)) };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("backbone.{l}");
            layers.push(LayerParams {
                ln1: pair(norm_names(&format!("{p}.ln1")))?,
                wq: pair(linear_names(&format!("{p}.attn.q")))?,
                wk: pair(linear_names(&format!("{p}.attn.k")))?,
                wv: pair(linear_names(&format!("{p}.attn.v")))?,
                wo: pair(linear_names(&format!("{p}.attn.o")))?,
                ln2: pair(norm_names(&format!("{p}.ln2")))?,
                ff1: pair(linear_names(&format!("{p}.ffn.1")))?,
                ff2: pair(linear_names(&format!("{p}.ffn.2")))?,
            });
        }
        let final_ln = if cfg.layers > 0 { Some(pair(norm_names("backbone.final_ln"))?) } else { None };
        Ok(BackboneParams { layers, final_ln, heads: cfg.heads, hidden: cfg.hidden, dropout: cfg.dropout })
    }

    /// Runs the stack on a padded `batch * max_len` token matrix already on
    /// the tape. Dropout is applied only when `rng` is given.
    pub fn forward_graph<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        mut x: Var,
        lengths: &[usize],
        max_len: usize,
        mut rng: Option<&mut R>,
    ) -> Var {
        for layer in &self.layers {
            let h = g.layer_norm(x, layer.ln1.0, layer.ln1.1);
            let q = g.linear(h, layer.wq.0, layer.wq.1);
            let k = g.linear(h, layer.wk.0, layer.wk.1);
            let v = g.linear(h, layer.wv.0, layer.wv.1);
            let a = g.attention(q, k, v, lengths, max_len, self.heads);
            let mut o = g.linear(a, layer.wo.0, layer.wo.1);
            if let Some(r) = rng.as_deref_mut() {
                o = g.dropout(o, self.dropout, r);
            }
            x = g.add(x, o);

            let h = g.layer_norm(x, layer.ln2.0, layer.ln2.1);
            let f = g.linear(h, layer.ff1.0, layer.ff1.1);
            let f = g.gelu(f);
            let mut f = g.linear(f, layer.ff2.0, layer.ff2.1);
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, self.dropout, r);
            }
            x = g.add(x, f);
        }
        if let Some((gamma, beta)) = self.final_ln {
            x = g.layer_norm(x, gamma, beta);
        }
        x
    }

    /// Forward pass outside of training. `train_mode` enables dropout, which
    /// then draws from `rng`.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        batch: &TokenBatch<T>,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<TokenBatch<T>> {
        if batch.tokens.cols() != self.hidden {
            return Err(Error::shape(format!("token width {} but hidden size is {}", batch.tokens.cols(), self.hidden)));
        }
        if batch.tokens.rows() != batch.lengths.len() * batch.max_len {
            return Err(Error::shape("token rows do not match batch layout"));
        }
        let mut g = Graph::new(store);
        let x = g.constant(batch.tokens.clone());
        let y = self.forward_graph(&mut g, x, &batch.lengths, batch.max_len, train_mode.then_some(rng));
        Ok(TokenBatch { tokens: g.value(y).clone(), lengths: batch.lengths.clone(), max_len: batch.max_len })
    }
}

/// Closed-form size of the encoder stack alone.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let d = cfg.hidden;
    let f = cfg.ffn;
    let attention = 4 * (d * d + d);
    let feed_forward = d * f + f + f * d + d;
    let norms = 2 * 2 * d;
    let final_norm = if cfg.layers > 0 { 2 * d } else { 0 };
    cfg.layers * (attention + feed_forward + norms) + final_norm
}
