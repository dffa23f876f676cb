//! On-disk ingestion: ProteinGym-style task CSVs, the indexed binary
//! embedding container, and the task registry.
//!
//! Task CSV: header `sequence,fitness[,aux_score][,mutant]`, UTF-8, comma
//! separated, sequences unquoted.
//!
//! Embedding container: `<name>.manifest` with tab-separated
//! `key\toffset\tL\tD_in` lines plus `<name>.bin` holding row-major
//! little-endian f32 values.

use crate::tasks::{standardize_task, Alphabet, FamilyTag, FitnessTask, Record, Sequence};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} row {row}: {message}")]
    ParseError { path: PathBuf, row: usize, message: String },
    #[error("duplicate sequence in {path} row {row}")]
    DuplicateSequence { path: PathBuf, row: usize },
    #[error("degenerate task in {path}: {message}")]
    DegenerateTask { path: PathBuf, message: String },
    #[error("format error in {path}: {message}")]
    FormatError { path: PathBuf, message: String },
    #[error("shape mismatch for key {key:?}: matrix has {got} rows, sequence length {expected}")]
    ShapeMismatch { key: String, got: usize, expected: usize },
    #[error("missing embedding for sequence {key:?}")]
    MissingEmbedding { key: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Parse one task CSV and standardize its labels.
pub fn load_task_csv(
    path: &Path,
    alphabet: &Arc<Alphabet>,
    max_len: usize,
) -> Result<FitnessTask, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::ParseError { path: path.into(), row: 0, message: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::ParseError { path: path.into(), row: 0, message: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let seq_col = col("sequence").ok_or_else(|| DataError::ParseError {
        path: path.into(),
        row: 0,
        message: "missing `sequence` column".into(),
    })?;
    let fit_col = col("fitness").ok_or_else(|| DataError::ParseError {
        path: path.into(),
        row: 0,
        message: "missing `fitness` column".into(),
    })?;
    let aux_col = col("aux_score");
    let mut_col = col("mutant");

    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2; // 1-based, after header
        let row = row.map_err(|e| DataError::ParseError {
            path: path.into(),
            row: rownum,
            message: e.to_string(),
        })?;
        let seq_str = row.get(seq_col).unwrap_or("").to_string();
        if !seen.insert(seq_str.clone()) {
            return Err(DataError::DuplicateSequence { path: path.into(), row: rownum });
        }
        let sequence = Sequence::parse(&seq_str, alphabet, max_len).map_err(|e| {
            DataError::ParseError { path: path.into(), row: rownum, message: e.to_string() }
        })?;
        let fitness: f64 = row
            .get(fit_col)
            .unwrap_or("")
            .parse()
            .map_err(|e| DataError::ParseError {
                path: path.into(),
                row: rownum,
                message: format!("bad fitness: {e}"),
            })?;
        let aux_score = match aux_col.and_then(|c| row.get(c)) {
            Some(s) if !s.is_empty() => Some(s.parse().map_err(|e| DataError::ParseError {
                path: path.into(),
                row: rownum,
                message: format!("bad aux_score: {e}"),
            })?),
            _ => None,
        };
        let mutant = mut_col.and_then(|c| row.get(c)).filter(|s| !s.is_empty()).map(String::from);
        records.push(Record { sequence, fitness, aux_score, mutant });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    let multi = records.iter().any(|r| r.mutant.as_deref().map_or(false, |m| m.contains(':')));
    let task = FitnessTask {
        name,
        alphabet: alphabet.clone(),
        wild_type: None,
        records,
        family_tag: if multi { FamilyTag::MultiMutant } else { FamilyTag::SingleMutant },
    };
    standardize_task(&task)
        .map_err(|e| DataError::DegenerateTask { path: path.into(), message: e.to_string() })
}

/// Write a task back out in the interchange CSV format.
pub fn write_task_csv(task: &FitnessTask, path: &Path) -> Result<(), DataError> {
    let has_aux = task.records.iter().any(|r| r.aux_score.is_some());
    let mut out = String::new();
    out.push_str(if has_aux { "sequence,fitness,aux_score\n" } else { "sequence,fitness\n" });
    for r in &task.records {
        out.push_str(&r.sequence.to_string(&task.alphabet));
        out.push(',');
        out.push_str(&format!("{:.17}", r.fitness));
        if has_aux {
            out.push(',');
            if let Some(a) = r.aux_score {
                out.push_str(&format!("{a:.17}"));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub d_in: usize,
    matrices: HashMap<String, Tensor>,
}

impl EmbeddingTable {
    pub fn new(d_in: usize) -> Self {
        EmbeddingTable { d_in, matrices: HashMap::new() }
    }

    pub fn insert(&mut self, key: String, matrix: Tensor) {
        assert_eq!(matrix.cols, self.d_in);
        self.matrices.insert(key, matrix);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.matrices.get(key)
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Write `<stem>.manifest` + `<stem>.bin`. Keys sorted for stable output.
    pub fn save(&self, stem: &Path) -> Result<(), DataError> {
        let manifest_path = stem.with_extension("manifest");
        let bin_path = stem.with_extension("bin");
        let mut manifest = String::new();
        let mut bin: Vec<u8> = Vec::new();
        let sorted: BTreeMap<&String, &Tensor> = self.matrices.iter().collect();
        for (key, m) in sorted {
            let offset = bin.len();
            for v in &m.data {
                bin.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            manifest.push_str(&format!("{key}\t{offset}\t{}\t{}\n", m.rows, m.cols));
        }
        std::fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
        let mut f = std::fs::File::create(&bin_path).map_err(io_err(&bin_path))?;
        f.write_all(&bin).map_err(io_err(&bin_path))
    }

    /// Load from `<stem>.manifest` + `<stem>.bin`, validating shapes against
    /// the keys' lengths.
    pub fn load(stem: &Path) -> Result<Self, DataError> {
        let manifest_path = stem.with_extension("manifest");
        let bin_path = stem.with_extension("bin");
        let manifest =
            std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let mut bin = Vec::new();
        std::fs::File::open(&bin_path)
            .map_err(io_err(&bin_path))?
            .read_to_end(&mut bin)
            .map_err(io_err(&bin_path))?;
        let mut d_in: Option<usize> = None;
        let mut matrices = HashMap::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(DataError::FormatError {
                    path: manifest_path.clone(),
                    message: format!("line {}: expected 4 tab-separated fields", lineno + 1),
                });
            }
            let key = parts[0].to_string();
            let bad = |m: String| DataError::FormatError { path: manifest_path.clone(), message: m };
            let offset: usize =
                parts[1].parse().map_err(|e| bad(format!("bad offset: {e}")))?;
            let rows: usize = parts[2].parse().map_err(|e| bad(format!("bad L: {e}")))?;
            let cols: usize = parts[3].parse().map_err(|e| bad(format!("bad D_in: {e}")))?;
            if rows != key.chars().count() {
                return Err(DataError::ShapeMismatch {
                    key,
                    got: rows,
                    expected: parts[0].chars().count(),
                });
            }
            match d_in {
                None => d_in = Some(cols),
                Some(d) if d != cols => {
                    return Err(bad(format!("inconsistent D_in: {d} vs {cols}")))
                }
                _ => {}
            }
            let nbytes = rows * cols * 4;
            if offset + nbytes > bin.len() {
                return Err(bad(format!("entry {key} runs past end of payload")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows * cols {
                let b = &bin[offset + i * 4..offset + i * 4 + 4];
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            matrices.insert(key, Tensor::from_vec(rows, cols, data));
        }
        let d_in = d_in.ok_or_else(|| DataError::FormatError {
            path: manifest_path.clone(),
            message: "empty manifest".into(),
        })?;
        Ok(EmbeddingTable { d_in, matrices })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TaskRegistry {
    pub tasks: BTreeMap<String, FitnessTask>,
    pub provenance: BTreeMap<String, PathBuf>,
}

impl TaskRegistry {
    pub fn insert(&mut self, task: FitnessTask, source: PathBuf) {
        self.provenance.insert(task.name.clone(), source);
        self.tasks.insert(task.name.clone(), task);
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Load every `*.csv` in a directory, sorted by filename.
    pub fn load_dir(
        dir: &Path,
        alphabet: &Arc<Alphabet>,
        max_len: usize,
    ) -> Result<Self, DataError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |x| x == "csv"))
            .collect();
        paths.sort();
        let mut reg = TaskRegistry::default();
        for p in paths {
            let task = load_task_csv(&p, alphabet, max_len)?;
            reg.insert(task, p);
        }
        Ok(reg)
    }
}

/// Drop tasks whose longest sequence exceeds `max_len`. Removals are returned
/// so callers can log them.
pub fn filter_by_length(registry: TaskRegistry, max_len: usize) -> (TaskRegistry, Vec<String>) {
    let mut kept = TaskRegistry::default();
    let mut removed = Vec::new();
    for (name, task) in registry.tasks {
        if task.max_seq_len() <= max_len {
            let prov = registry.provenance.get(&name).cloned().unwrap_or_default();
            kept.insert(task, prov);
        } else {
            removed.push(name);
        }
    }
    (kept, removed)
}
