//! Embedding providers: sequence -> (L, D_in) per-residue matrix. These stand
//! in for a frozen pretrained language model; the learned-table provider is
//! trained jointly and plays that role for synthetic experiments.

use crate::data::{DataError, EmbeddingTable};
use crate::tasks::{Alphabet, Sequence};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Onehot,
    LearnedTable,
    FileBacked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// D_in for learned_table; ignored for onehot (forced to |alphabet|) and
    /// file_backed (read from the manifest).
    pub d_in: usize,
    pub path: Option<PathBuf>,
    /// When true, no gradients flow into the learned table. Onehot and
    /// file-backed providers are trivially frozen.
    pub freeze_embeddings: bool,
}

impl ProviderConfig {
    pub fn learned(d_in: usize) -> Self {
        ProviderConfig { kind: ProviderKind::LearnedTable, d_in, path: None, freeze_embeddings: false }
    }

    pub fn onehot() -> Self {
        ProviderConfig { kind: ProviderKind::Onehot, d_in: 0, path: None, freeze_embeddings: true }
    }
}

#[derive(Clone, Debug)]
pub enum Provider {
    Onehot { alphabet: Arc<Alphabet> },
    /// Token rows live in `ModelParams`; the provider only records shape.
    LearnedTable { alphabet: Arc<Alphabet>, d_in: usize, frozen: bool },
    FileBacked { alphabet: Arc<Alphabet>, table: Arc<EmbeddingTable> },
}

impl Provider {
    pub fn from_config(config: &ProviderConfig, alphabet: Arc<Alphabet>) -> Result<Self, DataError> {
        Ok(match config.kind {
            ProviderKind::Onehot => Provider::Onehot { alphabet },
            ProviderKind::LearnedTable => Provider::LearnedTable {
                alphabet,
                d_in: config.d_in,
                frozen: config.freeze_embeddings,
            },
            ProviderKind::FileBacked => {
                let stem = config.path.clone().ok_or_else(|| DataError::FormatError {
                    path: PathBuf::new(),
                    message: "file_backed provider requires a path".into(),
                })?;
                let table = EmbeddingTable::load(&stem)?;
                Provider::FileBacked { alphabet, table: Arc::new(table) }
            }
        })
    }

    pub fn d_in(&self) -> usize {
        match self {
            Provider::Onehot { alphabet } => alphabet.size(),
            Provider::LearnedTable { d_in, .. } => *d_in,
            Provider::FileBacked { table, .. } => table.d_in,
        }
    }

    pub fn alphabet(&self) -> &Arc<Alphabet> {
        match self {
            Provider::Onehot { alphabet }
            | Provider::LearnedTable { alphabet, .. }
            | Provider::FileBacked { alphabet, .. } => alphabet,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Provider::LearnedTable { frozen: false, .. })
    }

    /// Materialize the (L, D_in) matrix for a sequence. For the learned
    /// provider the caller passes the current token table.
    pub fn embed(&self, seq: &Sequence, learned_table: Option<&Tensor>) -> Result<Tensor, DataError> {
        match self {
            Provider::Onehot { alphabet } => {
                let a = alphabet.size();
                let mut m = Tensor::zeros(seq.len(), a);
                for (r, &t) in seq.tokens().iter().enumerate() {
                    *m.at_mut(r, t as usize) = 1.0;
                }
                Ok(m)
            }
            Provider::LearnedTable { d_in, .. } => {
                let table = learned_table.expect("learned provider needs the token table");
                assert_eq!(table.cols, *d_in);
                let mut m = Tensor::zeros(seq.len(), *d_in);
                for (r, &t) in seq.tokens().iter().enumerate() {
                    m.row_mut(r).copy_from_slice(table.row(t as usize));
                }
                Ok(m)
            }
            Provider::FileBacked { alphabet, table } => {
                let key = seq.to_string(alphabet);
                let m = table
                    .get(&key)
                    .ok_or(DataError::MissingEmbedding { key: key.clone() })?;
                if m.rows != seq.len() {
                    return Err(DataError::ShapeMismatch { key, got: m.rows, expected: seq.len() });
                }
                Ok(m.clone())
            }
        }
    }

    /// Check every sequence is embeddable before any work starts.
    pub fn check_coverage<'a>(
        &self,
        seqs: impl Iterator<Item = &'a Sequence>,
    ) -> Result<(), DataError> {
        if let Provider::FileBacked { alphabet, table } = self {
            for s in seqs {
                let key = s.to_string(alphabet);
                if table.get(&key).is_none() {
                    return Err(DataError::MissingEmbedding { key });
                }
            }
        }
        Ok(())
    }
}
