//! Pairwise class similarity and context representations.
//!
//! Class similarity is the cosine between class mean embeddings, computed
//! from the train split of the manifest's reference configuration. A
//! context (a class combination) is represented by the mean and population
//! standard deviation of its pairwise similarities.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dataset::{class_representation, DatasetError, EmbeddingDataset};

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("combination needs at least 2 classes, got {0}")]
    ComboTooSmall(usize),
    #[error("class {0} appears more than once in the combination")]
    DuplicateClassInCombo(usize),
    #[error("class index {index} out of range (N={n})")]
    ClassOutOfRange { index: usize, n: usize },
    #[error("confusion row {0} has no samples")]
    EmptyRow(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pairwise class similarities under one configuration. Symmetric, unit
/// diagonal, entries in [-1, 1].
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub config_id: String,
    values: Vec<f64>,
    n: usize,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Builds a matrix from raw values (used by tests and tools that source
    /// similarities elsewhere, e.g. a confusion matrix).
    pub fn from_values(config_id: &str, values: Vec<Vec<f64>>) -> Self {
        let n = values.len();
        let mut flat = Vec::with_capacity(n * n);
        for row in &values {
            flat.extend_from_slice(row);
        }
        SimilarityMatrix {
            config_id: config_id.to_string(),
            values: flat,
            n,
        }
    }

    /// CSV dump, rows and columns in manifest class order.
    pub fn write_csv(&self, class_names: &[String], path: &Path) -> std::io::Result<()> {
        let mut out = String::from("class");
        for name in class_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for i in 0..self.n {
            let _ = write!(out, "{}", class_names[i]);
            for j in 0..self.n {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        fs::write(path, out)
    }
}

/// Cosine similarity of class representations for every class pair.
pub fn similarity_matrix(
    dataset: &EmbeddingDataset,
    config_id: &str,
) -> Result<SimilarityMatrix, SimilarityError> {
    let n = dataset.manifest.num_classes();
    let reps: Vec<Vec<f64>> = (0..n)
        .map(|c| class_representation(dataset, config_id, c).map(|r| r.vector))
        .collect::<Result<_, _>>()?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let s = cosine_similarity(&reps[i], &reps[j])?;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        config_id: config_id.to_string(),
        values,
        n,
    })
}

/// The (mean, std) similarity vector of a class combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRepresentation {
    /// Sorted class indices.
    pub combo: Vec<usize>,
    pub mean_sim: f64,
    pub std_sim: f64,
}

fn pairwise_sims(s: &SimilarityMatrix, combo: &[usize]) -> Result<Vec<f64>, SimilarityError> {
    if combo.len() < 2 {
        return Err(SimilarityError::ComboTooSmall(combo.len()));
    }
    let mut sorted = combo.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(SimilarityError::DuplicateClassInCombo(w[0]));
        }
    }
    for &c in &sorted {
        if c >= s.n() {
            return Err(SimilarityError::ClassOutOfRange { index: c, n: s.n() });
        }
    }
    let mut sims = Vec::with_capacity(sorted.len() * (sorted.len() - 1) / 2);
    for (a, &i) in sorted.iter().enumerate() {
        for &j in &sorted[a + 1..] {
            sims.push(s.get(i, j));
        }
    }
    Ok(sims)
}

/// Mean and population standard deviation over the m(m-1)/2 pairwise
/// similarities of the combination. Invariant under combo permutation.
pub fn context_representation(
    s: &SimilarityMatrix,
    combo: &[usize],
) -> Result<ContextRepresentation, SimilarityError> {
    let sims = pairwise_sims(s, combo)?;
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    let var = sims.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / sims.len() as f64;
    let mut sorted = combo.to_vec();
    sorted.sort_unstable();
    Ok(ContextRepresentation {
        combo: sorted,
        mean_sim: mean,
        std_sim: var.sqrt(),
    })
}

/// Alternative context representation: the extrema of pairwise similarities.
pub fn minmax_representation(
    s: &SimilarityMatrix,
    combo: &[usize],
) -> Result<(f64, f64), SimilarityError> {
    let sims = pairwise_sims(s, combo)?;
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = sims.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((max, min))
}

/// Min-max normalization to [0, 1]; a constant list maps to all zeros.
pub fn normalize_similarities(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Confusion-matrix based similarity: cross-misclassifications of classes
/// `i` and `j`, normalized by their total sample count. Symmetric.
pub fn confusion_similarity(
    confusion: &[Vec<u64>],
    i: usize,
    j: usize,
) -> Result<f64, SimilarityError> {
    let row_total = |r: usize| confusion[r].iter().sum::<u64>();
    for r in [i, j] {
        if row_total(r) == 0 {
            return Err(SimilarityError::EmptyRow(r));
        }
    }
    let cross = confusion[i][j] + confusion[j][i];
    Ok(cross as f64 / (row_total(i) + row_total(j)) as f64)
}
