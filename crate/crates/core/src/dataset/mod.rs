//! Embedding dataset ingestion, validation and serving.
//!
//! A dataset on disk is a `manifest.json` next to one CSV per
//! (configuration, split) under `embeddings/<config_id>/<split>.csv`.
//! The CSV format is fixed: header `sample_id,class_index,seq_index,e0,...,e{d-1}`,
//! UTF-8, LF line endings, floats in shortest round-trip decimal form
//! (what Rust's `Display` for `f64` produces). Files written by
//! [`write_embeddings`] reload byte-identically.
//!
//! Datasets are immutable after load and safe to share across threads.

pub mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";
pub const TEST_SPLIT: &str = "test";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation in field `{field}`: {message}")]
    SchemaViolation { field: String, message: String },
    #[error("duplicate class name: {0}")]
    DuplicateClass(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("{path}:{line}: expected {expected} embedding values, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: class index {index} out of range (N={n})")]
    UnknownClassIndex {
        path: PathBuf,
        line: usize,
        index: i64,
        n: usize,
    },
    #[error("{path}:{line}: non-finite embedding value `{value}`")]
    NonFiniteValue {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("class {class_index} has no samples in split `{split}` of config `{config}`")]
    EmptyClass {
        config: String,
        split: String,
        class_index: usize,
    },
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl DatasetError {
    fn schema(field: &str, message: impl Into<String>) -> Self {
        DatasetError::SchemaViolation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One feature-extractor configuration: identity plus cost model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigDescriptor {
    pub id: String,
    pub pruning_pct: u8,
    pub resolution: u32,
    pub flops_m: f64,
    pub embedding_dim: usize,
    /// Milliseconds per inference, keyed by device name.
    pub device_latency_ms: BTreeMap<String, f64>,
    #[serde(default = "default_param_bytes")]
    pub param_bytes_per_weight: u64,
}

fn default_param_bytes() -> u64 {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    /// Class names; index into this list is the class index used everywhere.
    pub classes: Vec<String>,
    pub configs: Vec<ConfigDescriptor>,
    /// Configuration whose embeddings define class similarity. Defaults to
    /// the highest-FLOPs configuration when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_config: Option<String>,
    /// Split name -> ordered sample-id list. Splits are pairwise disjoint.
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub notes: String,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Directory the manifest was loaded from (or saved to).
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self, id: &str) -> Option<&ConfigDescriptor> {
        self.configs.iter().find(|c| c.id == id)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Resolves the similarity reference configuration.
    pub fn reference_config_id(&self) -> &str {
        match &self.reference_config {
            Some(id) => id,
            None => {
                &self
                    .configs
                    .iter()
                    .max_by(|a, b| a.flops_m.total_cmp(&b.flops_m))
                    .expect("validated manifest has configs")
                    .id
            }
        }
    }

    /// Configurations sorted ascending by FLOPs (ties by id).
    pub fn configs_by_flops(&self) -> Vec<&ConfigDescriptor> {
        let mut v: Vec<&ConfigDescriptor> = self.configs.iter().collect();
        v.sort_by(|a, b| a.flops_m.total_cmp(&b.flops_m).then(a.id.cmp(&b.id)));
        v
    }

    pub fn embeddings_path(&self, config_id: &str, split: &str) -> PathBuf {
        self.root
            .join("embeddings")
            .join(config_id)
            .join(format!("{split}.csv"))
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.classes.len() < 2 {
            return Err(DatasetError::schema(
                "classes",
                format!("need at least 2 classes, found {}", self.classes.len()),
            ));
        }
        let mut seen = HashSet::new();
        for name in &self.classes {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::DuplicateClass(name.clone()));
            }
        }
        if self.configs.is_empty() {
            return Err(DatasetError::schema("configs", "at least one config required"));
        }
        let mut ids = HashSet::new();
        for cfg in &self.configs {
            if !ids.insert(cfg.id.as_str()) {
                return Err(DatasetError::schema(
                    "configs",
                    format!("duplicate config id `{}`", cfg.id),
                ));
            }
            if cfg.pruning_pct > 99 {
                return Err(DatasetError::schema(
                    "configs",
                    format!("config `{}`: pruning_pct must be in 0..=99", cfg.id),
                ));
            }
            if !(cfg.flops_m > 0.0) {
                return Err(DatasetError::schema(
                    "configs",
                    format!("config `{}`: flops_m must be positive", cfg.id),
                ));
            }
            if cfg.embedding_dim == 0 {
                return Err(DatasetError::schema(
                    "configs",
                    format!("config `{}`: embedding_dim must be positive", cfg.id),
                ));
            }
            for (dev, ms) in &cfg.device_latency_ms {
                if !(*ms > 0.0) {
                    return Err(DatasetError::schema(
                        "configs",
                        format!("config `{}`: latency for `{dev}` must be positive", cfg.id),
                    ));
                }
            }
        }
        if let Some(reference) = &self.reference_config {
            if self.config(reference).is_none() {
                return Err(DatasetError::schema(
                    "reference_config",
                    format!("unknown config `{reference}`"),
                ));
            }
        }
        for required in [TRAIN_SPLIT, TEST_SPLIT] {
            match self.splits.get(required) {
                None => return Err(DatasetError::EmptySplit(required.to_string())),
                Some(ids) if ids.is_empty() => {
                    return Err(DatasetError::EmptySplit(required.to_string()))
                }
                Some(_) => {}
            }
        }
        let mut all_ids: HashSet<&str> = HashSet::new();
        for (split, ids) in &self.splits {
            let mut in_split = HashSet::new();
            for id in ids {
                if !in_split.insert(id.as_str()) {
                    return Err(DatasetError::schema(
                        "splits",
                        format!("duplicate sample id `{id}` in split `{split}`"),
                    ));
                }
                if !all_ids.insert(id.as_str()) {
                    return Err(DatasetError::schema(
                        "splits",
                        format!("sample id `{id}` appears in more than one split"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Loads and validates `manifest.json`, checking that every referenced
/// embedding file exists and carries a well-formed header.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        DatasetError::schema("manifest", e.to_string())
    })?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    for cfg in &manifest.configs {
        for split in manifest.splits.keys() {
            let file = manifest.embeddings_path(&cfg.id, split);
            if !file.is_file() {
                return Err(DatasetError::MissingFile(file));
            }
            check_header(&file, cfg.embedding_dim)?;
        }
    }
    Ok(manifest)
}

fn expected_header(dim: usize) -> String {
    let mut h = String::from("sample_id,class_index,seq_index");
    for i in 0..dim {
        let _ = write!(h, ",e{i}");
    }
    h
}

fn check_header(path: &Path, dim: usize) -> Result<(), DatasetError> {
    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| DatasetError::io(path, e))?;
    let header = header.trim_end_matches('\n');
    if header != expected_header(dim) {
        return Err(DatasetError::schema(
            "header",
            format!("{}: expected `{}`", path.display(), expected_header(dim)),
        ));
    }
    Ok(())
}

/// One (configuration, split) table of embeddings, rows in file order.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub config_id: String,
    pub split: String,
    pub dim: usize,
    pub sample_ids: Vec<String>,
    pub class_indices: Vec<usize>,
    /// -1 means "no temporal order".
    pub seq_indices: Vec<i64>,
    values: Vec<f64>,
    by_sample: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of_sample(&self, sample_id: &str) -> Option<usize> {
        self.by_sample.get(sample_id).copied()
    }

    fn from_parts(
        config_id: String,
        split: String,
        dim: usize,
        sample_ids: Vec<String>,
        class_indices: Vec<usize>,
        seq_indices: Vec<i64>,
        values: Vec<f64>,
    ) -> Self {
        let by_sample = sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        EmbeddingMatrix {
            config_id,
            split,
            dim,
            sample_ids,
            class_indices,
            seq_indices,
            values,
            by_sample,
        }
    }
}

/// Loads one embedding CSV, validating dimensions, class indices and
/// finiteness, and checking the rows against the manifest split.
pub fn load_embeddings(
    manifest: &Manifest,
    config_id: &str,
    split: &str,
) -> Result<EmbeddingMatrix, DatasetError> {
    let cfg = manifest
        .config(config_id)
        .ok_or_else(|| DatasetError::schema("configs", format!("unknown config `{config_id}`")))?;
    let split_ids = manifest
        .splits
        .get(split)
        .ok_or_else(|| DatasetError::schema("splits", format!("unknown split `{split}`")))?;
    let path = manifest.embeddings_path(config_id, split);
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path));
    }
    let file = fs::File::open(&path).map_err(|e| DatasetError::io(&path, e))?;
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|e| DatasetError::io(&path, e))?;

    let dim = cfg.embedding_dim;
    let n = manifest.num_classes();
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected_header(dim) => {}
        _ => {
            return Err(DatasetError::schema(
                "header",
                format!("{}: expected `{}`", path.display(), expected_header(dim)),
            ))
        }
    }

    let mut sample_ids = Vec::new();
    let mut class_indices = Vec::new();
    let mut seq_indices = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2; // 1-based, after header
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let sample_id = fields.next().unwrap_or_default();
        let class_field = fields.next().ok_or(DatasetError::DimensionMismatch {
            path: path.clone(),
            line: lineno,
            expected: dim,
            found: 0,
        })?;
        let class_raw: i64 = class_field.parse().map_err(|_| {
            DatasetError::schema(
                "class_index",
                format!("{}:{lineno}: not an integer: `{class_field}`", path.display()),
            )
        })?;
        if class_raw < 0 || class_raw as usize >= n {
            return Err(DatasetError::UnknownClassIndex {
                path: path.clone(),
                line: lineno,
                index: class_raw,
                n,
            });
        }
        let seq_field = fields.next().ok_or(DatasetError::DimensionMismatch {
            path: path.clone(),
            line: lineno,
            expected: dim,
            found: 0,
        })?;
        let seq: i64 = seq_field.parse().map_err(|_| {
            DatasetError::schema(
                "seq_index",
                format!("{}:{lineno}: not an integer: `{seq_field}`", path.display()),
            )
        })?;
        let mut row = Vec::with_capacity(dim);
        for field in fields {
            let v: f64 = field.parse().map_err(|_| {
                DatasetError::schema(
                    "embedding",
                    format!("{}:{lineno}: not a number: `{field}`", path.display()),
                )
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NonFiniteValue {
                    path: path.clone(),
                    line: lineno,
                    value: field.to_string(),
                });
            }
            row.push(v);
        }
        if row.len() != dim {
            return Err(DatasetError::DimensionMismatch {
                path: path.clone(),
                line: lineno,
                expected: dim,
                found: row.len(),
            });
        }
        sample_ids.push(sample_id.to_string());
        class_indices.push(class_raw as usize);
        seq_indices.push(seq);
        values.extend_from_slice(&row);
    }

    if sample_ids.len() != split_ids.len() {
        return Err(DatasetError::schema(
            "splits",
            format!(
                "{}: {} rows but split `{split}` lists {} samples",
                path.display(),
                sample_ids.len(),
                split_ids.len()
            ),
        ));
    }
    let listed: HashSet<&str> = split_ids.iter().map(String::as_str).collect();
    for id in &sample_ids {
        if !listed.contains(id.as_str()) {
            return Err(DatasetError::schema(
                "splits",
                format!("{}: sample `{id}` not listed in split `{split}`", path.display()),
            ));
        }
    }

    Ok(EmbeddingMatrix::from_parts(
        config_id.to_string(),
        split.to_string(),
        dim,
        sample_ids,
        class_indices,
        seq_indices,
        values,
    ))
}

/// Writes an embedding table in canonical form (LF endings, shortest
/// round-trip float formatting). Loading and re-writing a canonical file
/// reproduces it byte for byte.
pub fn write_embeddings(matrix: &EmbeddingMatrix, path: &Path) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    let mut out = String::new();
    out.push_str(&expected_header(matrix.dim));
    out.push('\n');
    for i in 0..matrix.rows() {
        let _ = write!(
            out,
            "{},{},{}",
            matrix.sample_ids[i], matrix.class_indices[i], matrix.seq_indices[i]
        );
        for v in matrix.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DatasetError::io(path, e))
}

/// A fully loaded dataset: manifest plus one matrix per (config, split).
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    pub manifest: Manifest,
    tables: BTreeMap<(String, String), EmbeddingMatrix>,
}

impl EmbeddingDataset {
    /// Loads the manifest at `path` and every referenced embedding table,
    /// checking that sample ids are aligned across configurations.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let manifest = load_manifest(path)?;
        let mut tables = BTreeMap::new();
        for cfg in &manifest.configs {
            for split in manifest.splits.keys() {
                let m = load_embeddings(&manifest, &cfg.id, split)?;
                tables.insert((cfg.id.clone(), split.clone()), m);
            }
        }
        let ds = EmbeddingDataset { manifest, tables };
        ds.check_alignment()?;
        Ok(ds)
    }

    pub fn from_parts(
        manifest: Manifest,
        matrices: Vec<EmbeddingMatrix>,
    ) -> Result<Self, DatasetError> {
        let mut tables = BTreeMap::new();
        for m in matrices {
            tables.insert((m.config_id.clone(), m.split.clone()), m);
        }
        let ds = EmbeddingDataset { manifest, tables };
        ds.check_alignment()?;
        Ok(ds)
    }

    fn check_alignment(&self) -> Result<(), DatasetError> {
        for split in self.manifest.splits.keys() {
            let mut reference: Option<(&str, HashSet<&str>)> = None;
            for cfg in &self.manifest.configs {
                let table = self.tables.get(&(cfg.id.clone(), split.clone())).ok_or_else(
                    || DatasetError::MissingFile(self.manifest.embeddings_path(&cfg.id, split)),
                )?;
                let ids: HashSet<&str> = table.sample_ids.iter().map(String::as_str).collect();
                match &reference {
                    None => reference = Some((&cfg.id, ids)),
                    Some((first, expected)) => {
                        if *expected != ids {
                            return Err(DatasetError::schema(
                                "splits",
                                format!(
                                    "split `{split}`: sample ids of config `{}` differ from `{first}`",
                                    cfg.id
                                ),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, config_id: &str, split: &str) -> Option<&EmbeddingMatrix> {
        self.tables
            .get(&(config_id.to_string(), split.to_string()))
    }

    /// Writes manifest and all embedding tables under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        manifest.root = dir.to_path_buf();
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| DatasetError::schema("manifest", e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")
            .map_err(|e| DatasetError::io(dir, e))?;
        for ((config_id, split), table) in &self.tables {
            write_embeddings(table, &manifest.embeddings_path(config_id, split))?;
        }
        Ok(())
    }
}

/// The mean train-split embedding of one class under one configuration.
#[derive(Debug, Clone)]
pub struct ClassRepresentation {
    pub config_id: String,
    pub class_index: usize,
    pub vector: Vec<f64>,
    pub sample_count: usize,
}

/// Component-wise mean over the train split. Deterministic and invariant
/// to sample order.
pub fn class_representation(
    dataset: &EmbeddingDataset,
    config_id: &str,
    class_index: usize,
) -> Result<ClassRepresentation, DatasetError> {
    let table = dataset.table(config_id, TRAIN_SPLIT).ok_or_else(|| {
        DatasetError::schema("configs", format!("unknown config `{config_id}`"))
    })?;
    let mut sum = vec![0.0; table.dim];
    let mut count = 0usize;
    for i in 0..table.rows() {
        if table.class_indices[i] == class_index {
            for (acc, v) in sum.iter_mut().zip(table.row(i)) {
                *acc += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(DatasetError::EmptyClass {
            config: config_id.to_string(),
            split: TRAIN_SPLIT.to_string(),
            class_index,
        });
    }
    for v in &mut sum {
        *v /= count as f64;
    }
    Ok(ClassRepresentation {
        config_id: config_id.to_string(),
        class_index,
        vector: sum,
        sample_count: count,
    })
}
