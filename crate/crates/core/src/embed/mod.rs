//! Fixed-dimension text embeddings for cell contents and column names.
//!
//! Three backends sit behind [`EmbedderHandle`]: a deterministic hashing
//! fallback (always available), an external sidecar process, and a
//! tab-separated file cache. Results are memoized per handle.

mod fallback;
mod file_cache;
mod sidecar;

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

pub use fallback::{fallback_embed, fnv1a64};
pub use file_cache::{read_file_cache, write_file_cache};
pub use sidecar::SidecarClient;

use crate::error::{Error, Result};

pub const DEFAULT_TEXT_DIM: usize = 384;

pub type TextEmbedding = Arc<[f32]>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    Fallback,
    Sidecar,
    FileCache,
}

enum Backend {
    Fallback,
    Sidecar(Mutex<SidecarClient>),
    FileCache { entries: HashMap<String, Vec<f32>>, on_miss: Option<Box<Backend>> },
}

impl Backend {
    fn embed(&self, texts: &[&str], dim: usize) -> Result<Vec<Vec<f32>>> {
        match self {
            Backend::Fallback => Ok(texts.iter().map(|t| fallback_embed(t, dim)).collect()),
            Backend::Sidecar(client) => {
                let mut c = client.lock().map_err(|_| Error::Transport("sidecar client poisoned".into()))?;
                c.embed(texts)
            }
            Backend::FileCache { entries, on_miss } => {
                let misses: Vec<&str> = texts.iter().copied().filter(|t| !entries.contains_key(*t)).collect();
                let mut filled: HashMap<&str, Vec<f32>> = HashMap::new();
                if !misses.is_empty() {
                    let inner = on_miss.as_ref().ok_or_else(|| {
                        Error::EmbedConfig(format!("text {:?} not present in embedding cache", misses[0]))
                    })?;
                    for (t, v) in misses.iter().zip(inner.embed(&misses, dim)?) {
                        filled.insert(t, v);
                    }
                }
                Ok(texts
                    .iter()
                    .map(|t| entries.get(*t).cloned().unwrap_or_else(|| filled[t].clone()))
                    .collect())
            }
        }
    }
}

/// A text embedder with a fixed output dimension and a memo table.
pub struct EmbedderHandle {
    kind: EmbedderKind,
    dim: usize,
    backend: Backend,
    memoize: bool,
    cache: RwLock<HashMap<String, TextEmbedding>>,
}

impl std::fmt::Debug for EmbedderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbedderHandle").field("kind", &self.kind).field("dim", &self.dim).finish()
    }
}

impl EmbedderHandle {
    fn with_backend(kind: EmbedderKind, dim: usize, backend: Backend) -> Self {
        EmbedderHandle { kind, dim, backend, memoize: true, cache: RwLock::new(HashMap::new()) }
    }

    pub fn fallback(dim: usize) -> Self {
        Self::with_backend(EmbedderKind::Fallback, dim, Backend::Fallback)
    }

    pub fn sidecar(client: SidecarClient) -> Self {
        let dim = client.dim();
        Self::with_backend(EmbedderKind::Sidecar, dim, Backend::Sidecar(Mutex::new(client)))
    }

    /// Launches `command` through the shell and performs the hello handshake.
    pub fn spawn_sidecar(command: &str, expected_dim: Option<usize>) -> Result<Self> {
        let client = SidecarClient::spawn(command)?;
        if let Some(d) = expected_dim {
            if client.dim() != d {
                return Err(Error::EmbedConfig(format!("sidecar reports dim {} but {d} is configured", client.dim())));
            }
        }
        Ok(Self::sidecar(client))
    }

    /// Loads a file cache; texts not in the file are embedded with the
    /// fallback hasher when `fallback_on_miss` is set, otherwise they error.
    pub fn file_cache(path: &Path, fallback_on_miss: bool) -> Result<Self> {
        let (dim, entries) = read_file_cache(path)?;
        let on_miss = fallback_on_miss.then(|| Box::new(Backend::Fallback));
        Ok(Self::with_backend(EmbedderKind::FileCache, dim, Backend::FileCache { entries, on_miss }))
    }

    /// Disables memoization; results are unchanged, only recomputed.
    pub fn without_memo(mut self) -> Self {
        self.memoize = false;
        self
    }

    pub fn kind(&self) -> EmbedderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One embedding per input text. The empty string always maps to the
    /// reserved basis vector `e₀`.
    pub fn embed_text<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<TextEmbedding>> {
        let mut missing: Vec<&str> = Vec::new();
        if self.memoize {
            let cache = self.cache.read().expect("embedding cache poisoned");
            for t in texts {
                let t = t.as_ref();
                if !t.is_empty() && !cache.contains_key(t) && !missing.contains(&t) {
                    missing.push(t);
                }
            }
        } else {
            for t in texts {
                let t = t.as_ref();
                if !t.is_empty() && !missing.contains(&t) {
                    missing.push(t);
                }
            }
        }

        let mut fresh: HashMap<&str, TextEmbedding> = HashMap::new();
        if !missing.is_empty() {
            let vectors = self.backend.embed(&missing, self.dim)?;
            if vectors.len() != missing.len() {
                return Err(Error::Transport(format!("expected {} embeddings, got {}", missing.len(), vectors.len())));
            }
            for (t, v) in missing.iter().zip(vectors) {
                if v.len() != self.dim {
                    return Err(Error::EmbedConfig(format!("embedding of length {} but dim is {}", v.len(), self.dim)));
                }
                fresh.insert(t, v.into());
            }
            if self.memoize {
                let mut cache = self.cache.write().expect("embedding cache poisoned");
                for (t, v) in &fresh {
                    cache.entry((*t).to_string()).or_insert_with(|| v.clone());
                }
            }
        }

        let reserved: TextEmbedding = {
            let mut e = vec![0.0f32; self.dim];
            e[0] = 1.0;
            e.into()
        };
        let cache = self.cache.read().expect("embedding cache poisoned");
        Ok(texts
            .iter()
            .map(|t| {
                let t = t.as_ref();
                if t.is_empty() {
                    reserved.clone()
                } else if let Some(v) = fresh.get(t) {
                    v.clone()
                } else {
                    cache[t].clone()
                }
            })
            .collect())
    }

    pub fn embed_one(&self, text: &str) -> Result<TextEmbedding> {
        Ok(self.embed_text(&[text])?.remove(0))
    }

    /// Writes every memoized embedding in the file-cache format.
    pub fn export_cache(&self, path: &Path) -> Result<usize> {
        let cache = self.cache.read().expect("embedding cache poisoned");
        let entries: Vec<(&str, &[f32])> = cache.iter().map(|(k, v)| (k.as_str(), &v[..])).collect();
        write_file_cache(path, self.dim, entries)
    }
}
