//! Cell tokenization. Every non-missing cell becomes one `d`-vector: a
//! column-name term plus a type-specific content term.
//!
//! The token is linear in the encoder parameters. Each term is a constant
//! (one-hot selectors, soft-bin weights, text embeddings) times a parameter
//! table, so a zeroed cell is simply a cell with no content term.

pub mod date;
pub mod numeric;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{truncated_normal, ModelConfig, INIT_STD};
use crate::embed::{EmbedderHandle, TextEmbedding};
use crate::error::{Error, Result};
use crate::ingest::Row;
use crate::tensor::{Matrix, Scalar};
use crate::value::{CellValue, ColumnType};

pub use date::{date_features, DateFeatures, HOLIDAY_REGIONS};
pub use numeric::{decompose_number, soft_bin, NumericTriplet, Sign};

use date::{DAY_CLASSES, MONTH_CLASSES, WEEKDAY_CLASSES, YEAR_CLASSES};
use numeric::{EXPONENT_CLASSES, SIGN_CLASSES};

/// Content of a prepared cell, before any parameters are applied.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenContent {
    /// Name term only.
    Zeroed,
    Number { triplet: NumericTriplet, bins: Vec<f64> },
    Date(DateFeatures),
    Text(TextEmbedding),
}

/// A cell with its embeddings and derived features resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSpec {
    pub column: String,
    pub column_type: ColumnType,
    pub name_embedding: TextEmbedding,
    pub content: TokenContent,
}

impl TokenSpec {
    pub fn zeroed(&self) -> TokenSpec {
        TokenSpec { content: TokenContent::Zeroed, ..self.clone() }
    }
}

pub fn prepare_cell(value: &CellValue, column: &str, embedder: &EmbedderHandle, bins: usize) -> Result<TokenSpec> {
    let column_type = value
        .column_type()
        .ok_or_else(|| Error::invalid(format!("cannot encode a missing cell in column `{column}`")))?;
    let name_embedding = embedder.embed_one(column)?;
    let content = match value {
        CellValue::Number(x) => {
            let triplet = decompose_number(*x)?;
            TokenContent::Number { triplet, bins: soft_bin(triplet.alpha, bins)? }
        }
        CellValue::Date(d) => TokenContent::Date(date_features(d.date)),
        CellValue::Text(s) => TokenContent::Text(embedder.embed_one(s)?),
        CellValue::Missing => unreachable!(),
    };
    Ok(TokenSpec { column: column.to_string(), column_type, name_embedding, content })
}

/// Prepares every non-missing cell of `row`, in row order.
pub fn prepare_row(row: &Row, embedder: &EmbedderHandle, bins: usize) -> Result<Vec<TokenSpec>> {
    let specs = row
        .present()
        .map(|c| prepare_cell(&c.value, &c.column, embedder, bins))
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(Error::EmptyRow);
    }
    Ok(specs)
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    name: (ParamId, ParamId),
    text: (ParamId, ParamId),
    sign: ParamId,
    exponent: ParamId,
    fraction: ParamId,
    day: ParamId,
    month: ParamId,
    year: ParamId,
    weekday: ParamId,
    holiday: ParamId,
    bins: usize,
    text_dim: usize,
    hidden: usize,
}

const TABLES: [(&str, usize); 7] = [
    ("encoder.sign", SIGN_CLASSES),
    ("encoder.exponent", EXPONENT_CLASSES),
    ("encoder.day", DAY_CLASSES),
    ("encoder.month", MONTH_CLASSES),
    ("encoder.year", YEAR_CLASSES),
    ("encoder.weekday", WEEKDAY_CLASSES),
    ("encoder.holiday", HOLIDAY_REGIONS.len()),
];

impl EncoderParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, e) = (cfg.hidden, cfg.text_dim);
        store.insert("encoder.name.w", truncated_normal(e, d, INIT_STD, rng))?;
        store.insert("encoder.name.b", Matrix::zeros(1, d))?;
        store.insert("encoder.text.w", truncated_normal(e, d, INIT_STD, rng))?;
        store.insert("encoder.text.b", Matrix::zeros(1, d))?;
        store.insert("encoder.fraction", truncated_normal(cfg.bins, d, INIT_STD, rng))?;
        for (name, rows) in TABLES {
            store.insert(name, truncated_normal(rows, d, INIT_STD, rng))?;
        }
        Self::bind(store, cfg)
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let p = EncoderParams {
            name: (store.require("encoder.name.w")?, store.require("encoder.name.b")?),
            text: (store.require("encoder.text.w")?, store.require("encoder.text.b")?),
            sign: store.require("encoder.sign")?,
            exponent: store.require("encoder.exponent")?,
            fraction: store.require("encoder.fraction")?,
            day: store.require("encoder.day")?,
            month: store.require("encoder.month")?,
            year: store.require("encoder.year")?,
            weekday: store.require("encoder.weekday")?,
            holiday: store.require("encoder.holiday")?,
            bins: cfg.bins,
            text_dim: cfg.text_dim,
            hidden: cfg.hidden,
        };
        let shape = |id: ParamId| store.get(id).shape();
        let expected = [
            (p.name.0, (cfg.text_dim, cfg.hidden)),
            (p.text.0, (cfg.text_dim, cfg.hidden)),
            (p.fraction, (cfg.bins, cfg.hidden)),
            (p.sign, (SIGN_CLASSES, cfg.hidden)),
            (p.holiday, (HOLIDAY_REGIONS.len(), cfg.hidden)),
        ];
        for (id, want) in expected {
            if shape(id) != want {
                return Err(Error::Checkpoint(format!("{} has shape {:?}, expected {want:?}", store.name(id), shape(id))));
            }
        }
        Ok(p)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Puts the tokens of a padded batch on the tape.
    pub fn tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &EncoderInputs<T>) -> Var {
        let name_emb = g.constant(inputs.name_embedding.clone());
        let name_w = g.param(self.name.0);
        let mut acc = g.matmul(name_emb, name_w);
        let terms: [(&Matrix<T>, ParamId); 3] =
            [(&inputs.valid, self.name.1), (&inputs.text_indicator, self.text.1), (&inputs.fraction, self.fraction)];
        for (sel, id) in terms {
            acc = add_selected(g, acc, sel, id);
        }
        let text_emb = g.constant(inputs.text_embedding.clone());
        let text_w = g.param(self.text.0);
        let text = g.matmul(text_emb, text_w);
        acc = g.add(acc, text);
        let tables =
            [self.sign, self.exponent, self.day, self.month, self.year, self.weekday, self.holiday];
        for (sel, id) in inputs.selectors.iter().zip(tables) {
            acc = add_selected(g, acc, sel, id);
        }
        acc
    }

    /// Tokens of already-prepared cells, one matrix row per spec.
    pub fn encode_specs<T: Scalar>(&self, store: &ParamStore<T>, specs: &[TokenSpec]) -> Result<Matrix<T>> {
        let inputs = EncoderInputs::build(&[specs], self)?;
        let mut g = Graph::new(store);
        let v = self.tokens(&mut g, &inputs);
        Ok(g.value(v).clone())
    }
}

fn add_selected<T: Scalar>(g: &mut Graph<'_, T>, acc: Var, selector: &Matrix<T>, table: ParamId) -> Var {
    let s = g.constant(selector.clone());
    let p = g.param(table);
    let term = g.sparse_matmul(s, p);
    g.add(acc, term)
}

/// Constant encoder inputs for a padded batch of `rows * max_len` positions.
/// Padding positions are all-zero and therefore encode to the zero vector.
#[derive(Clone, Debug)]
pub struct EncoderInputs<T> {
    pub lengths: Vec<usize>,
    pub max_len: usize,
    name_embedding: Matrix<T>,
    valid: Matrix<T>,
    text_embedding: Matrix<T>,
    text_indicator: Matrix<T>,
    fraction: Matrix<T>,
    /// sign, exponent, day, month, year, weekday, holiday.
    selectors: [Matrix<T>; 7],
}

impl<T: Scalar> EncoderInputs<T> {
    pub fn build<S: AsRef<[TokenSpec]>>(rows: &[S], params: &EncoderParams) -> Result<Self> {
        let lengths: Vec<usize> = rows.iter().map(|r| r.as_ref().len()).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let n = rows.len() * max_len;
        let e = params.text_dim;
        let mut inputs = EncoderInputs {
            lengths,
            max_len,
            name_embedding: Matrix::zeros(n, e),
            valid: Matrix::zeros(n, 1),
            text_embedding: Matrix::zeros(n, e),
            text_indicator: Matrix::zeros(n, 1),
            fraction: Matrix::zeros(n, params.bins),
            selectors: TABLES.map(|(_, classes)| Matrix::zeros(n, classes)),
        };
        let one = T::one();
        for (b, row) in rows.iter().enumerate() {
            for (i, spec) in row.as_ref().iter().enumerate() {
                let r = b * max_len + i;
                copy_embedding(inputs.name_embedding.row_mut(r), &spec.name_embedding, e)?;
                inputs.valid.set(r, 0, one);
                match &spec.content {
                    TokenContent::Zeroed => {}
                    TokenContent::Number { triplet, bins } => {
                        if bins.len() != params.bins {
                            return Err(Error::shape(format!("{} fraction weights, model has {} bins", bins.len(), params.bins)));
                        }
                        inputs.selectors[0].set(r, triplet.sign.class(), one);
                        inputs.selectors[1].set(r, triplet.exponent_class(), one);
                        for (o, &w) in inputs.fraction.row_mut(r).iter_mut().zip(bins) {
                            *o = T::from_f64(w).expect("finite weight");
                        }
                    }
                    TokenContent::Date(f) => {
                        inputs.selectors[2].set(r, f.day_index(), one);
                        inputs.selectors[3].set(r, f.month_index(), one);
                        inputs.selectors[4].set(r, f.year_index(), one);
                        inputs.selectors[5].set(r, f.day_of_week as usize, one);
                        for (k, &on) in f.holidays.iter().enumerate() {
                            if on {
                                inputs.selectors[6].set(r, k, one);
                            }
                        }
                    }
                    TokenContent::Text(v) => {
                        copy_embedding(inputs.text_embedding.row_mut(r), v, e)?;
                        inputs.text_indicator.set(r, 0, one);
                    }
                }
            }
        }
        Ok(inputs)
    }

    pub fn num_positions(&self) -> usize {
        self.lengths.len() * self.max_len
    }
}

fn copy_embedding<T: Scalar>(dst: &mut [T], src: &[f32], e: usize) -> Result<()> {
    if src.len() != e {
        return Err(Error::EmbedConfig(format!("embedding of length {} but the model expects {e}", src.len())));
    }
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = T::from_f32_lossy(v);
    }
    Ok(())
}

/// Encoded tokens for one row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Matrix<T>,
    pub tags: Vec<ColumnType>,
    pub column_names: Vec<String>,
}

impl<T> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn encode_cell<T: Scalar>(
    store: &ParamStore<T>,
    params: &EncoderParams,
    value: &CellValue,
    column: &str,
    embedder: &EmbedderHandle,
) -> Result<Vec<T>> {
    let spec = prepare_cell(value, column, embedder, params.bins)?;
    Ok(params.encode_specs(store, &[spec])?.into_data())
}

pub fn encode_row<T: Scalar>(
    store: &ParamStore<T>,
    params: &EncoderParams,
    row: &Row,
    embedder: &EmbedderHandle,
) -> Result<TokenSequence<T>> {
    let specs = prepare_row(row, embedder, params.bins)?;
    Ok(TokenSequence {
        tokens: params.encode_specs(store, &specs)?,
        tags: specs.iter().map(|s| s.column_type).collect(),
        column_names: specs.iter().map(|s| s.column.clone()).collect(),
    })
}

/// Debug breakdown of a single value's encoding features.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Inspection {
    Number { value: f64, sign: Sign, alpha: f64, beta: i32, exponent_class: usize, bin_weights: Vec<f64> },
    Date { value: String, features: DateFeatures, year_index: usize, holiday_regions: Vec<&'static str> },
    Text { value: String, embedding_norm: f64, nonzero: usize },
}

pub fn inspect_value(raw: &str, ty: ColumnType, bins: usize, embedder: &EmbedderHandle) -> Result<Inspection> {
    match CellValue::parse_as(raw, ty) {
        CellValue::Missing => Err(Error::invalid(format!("`{raw}` does not parse as {ty}"))),
        CellValue::Number(x) => {
            let t = decompose_number(x)?;
            Ok(Inspection::Number {
                value: x,
                sign: t.sign,
                alpha: t.alpha,
                beta: t.beta,
                exponent_class: t.exponent_class(),
                bin_weights: soft_bin(t.alpha, bins)?,
            })
        }
        CellValue::Date(d) => {
            let f = date_features(d.date);
            let regions = HOLIDAY_REGIONS.iter().zip(&f.holidays).filter(|(_, &on)| on).map(|(r, _)| *r).collect();
            Ok(Inspection::Date { value: d.to_string(), year_index: f.year_index(), features: f, holiday_regions: regions })
        }
        CellValue::Text(s) => {
            let v = embedder.embed_one(&s)?;
            let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            Ok(Inspection::Text { value: s, embedding_norm: norm, nonzero: v.iter().filter(|&&x| x != 0.0).count() })
        }
    }
}
