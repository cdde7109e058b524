//! Binary checkpoints: a magic tag, a version, a JSON metadata block and the
//! raw parameter data.
//!
//! Layout: `PORTALCK`, format version (u32 LE), metadata length (u64 LE),
//! metadata JSON, then every tensor as little-endian f32 in directory order.
//! The metadata serializes in a fixed field order so identical models give
//! identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::backbone::ModelConfig;
use crate::embed::EmbedderKind;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneModel, Pooling, TaskSpec};
use crate::ingest::TableManifest;
use crate::model::PretrainModel;
use crate::tensor::{Matrix, Scalar};

pub const MAGIC: &[u8; 8] = b"PORTALCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderInfo {
    pub kind: EmbedderKind,
    pub dim: usize,
}

/// The fine-tuning half of the metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub target: String,
    pub spec: TaskSpec,
    pub pooling: Pooling,
    pub head_dropout: f64,
    /// Column layout of the training table, used to check evaluation data.
    pub manifest: TableManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in f32 elements from the start of the data block.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub embedder: EmbedderInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskInfo>,
    /// Free-form record of the run that produced the checkpoint.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub run: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_pretrain<T: Scalar>(model: &PretrainModel<T>, embedder: EmbedderInfo, run: serde_json::Value) -> Self {
        Self::build(CheckpointKind::Pretrain, model.config.clone(), embedder, None, run, model.store.cast())
    }

    pub fn from_finetune<T: Scalar>(
        model: &FinetuneModel<T>,
        manifest: TableManifest,
        embedder: EmbedderInfo,
        run: serde_json::Value,
    ) -> Self {
        let task = TaskInfo {
            target: model.target.clone(),
            spec: model.spec.clone(),
            pooling: model.pooling,
            head_dropout: model.head_dropout,
            manifest,
        };
        Self::build(CheckpointKind::Finetune, model.config.clone(), embedder, Some(task), run, model.store.cast())
    }

    fn build(
        kind: CheckpointKind,
        model: ModelConfig,
        embedder: EmbedderInfo,
        task: Option<TaskInfo>,
        run: serde_json::Value,
        store: ParamStore<f32>,
    ) -> Self {
        let mut offset = 0;
        let tensors = store
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry { name: name.to_string(), shape: [m.rows(), m.cols()], offset };
                offset += m.data().len();
                e
            })
            .collect();
        Checkpoint { meta: Metadata { kind, model, embedder, task, run, tensors }, store }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(20 + meta.len() + 4 * self.store.num_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, m) in self.store.iter() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word, "version")?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len, "metadata length")?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
        if len > r.len() {
            return Err(Error::Checkpoint("truncated metadata".into()));
        }
        let meta: Metadata = serde_json::from_slice(&r[..len])?;
        let data = &r[len..];
        let mut store = ParamStore::new();
        let mut expected = 0;
        for t in &meta.tensors {
            let n = t.shape[0] * t.shape[1];
            if t.offset != expected {
                return Err(Error::Checkpoint(format!("tensor `{}` at offset {} but expected {expected}", t.name, t.offset)));
            }
            let bytes = data
                .get(4 * t.offset..4 * (t.offset + n))
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for tensor `{}`", t.name)))?;
            let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            store.insert(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], values))?;
            expected += n;
        }
        if 4 * expected != data.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after tensor data", data.len() - 4 * expected)));
        }
        Ok(Checkpoint { meta, store })
    }

    /// Writes to a temporary sibling and renames it into place, so a failed
    /// run never leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn into_pretrain<T: Scalar>(self) -> Result<PretrainModel<T>> {
        if self.meta.kind != CheckpointKind::Pretrain {
            return Err(Error::Checkpoint("expected a pre-training checkpoint".into()));
        }
        PretrainModel::from_store(self.meta.model, self.store.cast())
    }

    /// Encoder and backbone weights of either checkpoint kind, for starting
    /// a fine-tuning run.
    pub fn backbone_store<T: Scalar>(&self) -> ParamStore<T> {
        self.store.without_prefix(crate::heads::PretrainHeads::PREFIX).without_prefix("task.").cast()
    }

    pub fn into_finetune<T: Scalar>(self) -> Result<(FinetuneModel<T>, TaskInfo)> {
        let task = self.meta.task.ok_or_else(|| Error::Checkpoint("expected a fine-tuned checkpoint".into()))?;
        let model = FinetuneModel::from_parts(
            self.meta.model,
            self.store.cast(),
            task.target.clone(),
            task.spec.clone(),
            task.pooling,
            task.head_dropout,
        )?;
        Ok((model, task))
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))
}
