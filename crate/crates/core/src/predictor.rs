//! The kNN configuration predictor.
//!
//! Offline, every sampled class combination is labeled with its oracle
//! configuration: the lowest-FLOPs configuration whose trained head pair
//! meets the target accuracy on the validation split. The (mean, std)
//! context representations of the sampled combinations plus those labels
//! form the kNN training set. At run time the predictor answers queries by
//! expanding-k majority vote: start at k nearest points, grow k until one
//! configuration holds a strict majority.
//!
//! Similarity-directed sampling buckets combinations into four quartile
//! groups by mean similarity and samples each group uniformly, so the
//! training set covers the whole hardness spectrum at a fraction of the
//! full training cost.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EmbeddingDataset;
use crate::heads::{train_heads, HeadHyperparams, HeadsError};
use crate::rng::{derive_seed, rng_from_seed};
use crate::similarity::{context_representation, SimilarityError, SimilarityMatrix};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("m must satisfy 2 <= m <= N, got m={m}, N={n}")]
    BadM { m: usize, n: usize },
    #[error("predictor has no training points")]
    EmptyTrainingSet,
    #[error("no predictor available for context size {0}")]
    MissingPredictor(usize),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad predictor file: {0}")]
    Format(#[from] serde_json::Error),
}

/// All C(N, m) sorted combinations in lexicographic order.
pub fn enumerate_combinations(n: usize, m: usize) -> Result<Vec<Vec<usize>>, PredictorError> {
    if m < 2 || m > n {
        return Err(PredictorError::BadM { m, n });
    }
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..m).collect();
    loop {
        out.push(current.clone());
        // Advance to the next lexicographic combination.
        let mut i = m;
        let mut advanced = false;
        while i > 0 {
            i -= 1;
            if current[i] != i + n - m {
                current[i] += 1;
                for j in i + 1..m {
                    current[j] = current[j - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            return Ok(out);
        }
    }
}

/// Outcome of the per-combination oracle search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub combo: Vec<usize>,
    /// Lowest-FLOPs config meeting the threshold, or the most accurate
    /// config when none does (then `unmet` is set).
    pub best_config: String,
    pub unmet: bool,
    /// Validation accuracy per config id, ascending FLOPs order.
    pub accuracies: Vec<(String, f64)>,
}

/// Trains one head pair per configuration (ascending FLOPs) and picks the
/// cheapest one whose validation accuracy reaches `acc_thr`. Head seeds are
/// derived per (config, combo), so results do not depend on evaluation
/// order.
pub fn oracle_config(
    dataset: &EmbeddingDataset,
    combo: &[usize],
    acc_thr: f64,
    hyper: &HeadHyperparams,
) -> Result<OracleOutcome, PredictorError> {
    let configs = dataset.manifest.configs_by_flops();
    let accuracies: Vec<(String, f64)> = configs
        .par_iter()
        .map(|cfg| -> Result<(String, f64), PredictorError> {
            let mut h = *hyper;
            h.seed = derive_seed(hyper.seed, &format!("{}/{:?}", cfg.id, combo));
            let trained = train_heads(dataset, &cfg.id, combo, &h)?;
            Ok((cfg.id.clone(), trained.val_accuracy))
        })
        .collect::<Result<_, _>>()?;
    let choice = accuracies.iter().find(|(_, acc)| *acc >= acc_thr);
    let (best_config, unmet) = match choice {
        Some((id, _)) => (id.clone(), false),
        None => {
            let best = accuracies
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("manifest has configs");
            (best.0.clone(), true)
        }
    };
    Ok(OracleOutcome {
        combo: combo.to_vec(),
        best_config,
        unmet,
        accuracies,
    })
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Similarity-directed sampling: combinations are split into four quartile
/// groups by mean similarity (boundaries at the 25/50/75th percentiles) and
/// `ceil(fraction * |group|)` are drawn uniformly from each group.
/// Deterministic for a fixed seed.
pub fn sd_sample(
    combos: &[Vec<usize>],
    sims: &SimilarityMatrix,
    fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, PredictorError> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1]");
    if combos.is_empty() {
        return Ok(Vec::new());
    }
    let means: Vec<f64> = combos
        .iter()
        .map(|c| context_representation(sims, c).map(|r| r.mean_sim))
        .collect::<Result<_, _>>()?;
    let mut sorted = means.clone();
    sorted.sort_by(f64::total_cmp);
    let q = [
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.50),
        percentile(&sorted, 0.75),
    ];
    let mut groups: [Vec<usize>; 4] = Default::default();
    for (i, &m) in means.iter().enumerate() {
        let g = if m <= q[0] {
            0
        } else if m <= q[1] {
            1
        } else if m <= q[2] {
            2
        } else {
            3
        };
        groups[g].push(i);
    }
    let mut rng = rng_from_seed(seed);
    let mut picked = Vec::new();
    for group in &groups {
        if group.is_empty() {
            continue;
        }
        let take = ((fraction * group.len() as f64).ceil() as usize).min(group.len());
        let mut shuffled = group.clone();
        shuffled.shuffle(&mut rng);
        picked.extend_from_slice(&shuffled[..take]);
    }
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| combos[i].clone()).collect())
}

/// One labeled kNN training point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub combo: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub config: String,
}

/// Min-max feature scaling ranges (kNN normalization is opt-in).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean_min: f64,
    pub mean_max: f64,
    pub std_min: f64,
    pub std_max: f64,
}

impl FeatureScaling {
    fn apply(&self, mean: f64, std: f64) -> (f64, f64) {
        let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        (
            scale(mean, self.mean_min, self.mean_max),
            scale(std, self.std_min, self.std_max),
        )
    }
}

/// The kNN configuration predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigPredictor {
    /// Context size the predictor was built for.
    pub m: usize,
    pub acc_thr: f64,
    pub k_start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<FeatureScaling>,
    pub points: Vec<TrainingPoint>,
}

impl ConfigPredictor {
    /// Builds a predictor from already-labeled points (deduplicated by
    /// combo). Queries are insertion-order independent.
    pub fn from_points(
        m: usize,
        acc_thr: f64,
        mut points: Vec<TrainingPoint>,
        normalize: bool,
    ) -> Result<Self, PredictorError> {
        points.sort_by(|a, b| a.combo.cmp(&b.combo));
        points.dedup_by(|a, b| a.combo == b.combo);
        if points.is_empty() {
            return Err(PredictorError::EmptyTrainingSet);
        }
        let scaling = if normalize {
            let fold = |f: fn(&TrainingPoint) -> f64| {
                let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
                let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            };
            let (mean_min, mean_max) = fold(|p| p.mean);
            let (std_min, std_max) = fold(|p| p.std);
            Some(FeatureScaling {
                mean_min,
                mean_max,
                std_min,
                std_max,
            })
        } else {
            None
        };
        Ok(ConfigPredictor {
            m,
            acc_thr,
            k_start: 3,
            scaling,
            points,
        })
    }

    /// Expanding-k majority vote. Distance is Euclidean over (mean, std);
    /// distance ties break by lexicographic combo order. When no strict
    /// majority emerges even over all points, the nearest point wins.
    pub fn predict_config(&self, mean: f64, std: f64) -> Result<&str, PredictorError> {
        if self.points.is_empty() {
            return Err(PredictorError::EmptyTrainingSet);
        }
        let (qm, qs) = match &self.scaling {
            Some(s) => s.apply(mean, std),
            None => (mean, std),
        };
        let mut order: Vec<(f64, &TrainingPoint)> = self
            .points
            .iter()
            .map(|p| {
                let (pm, ps) = match &self.scaling {
                    Some(s) => s.apply(p.mean, p.std),
                    None => (p.mean, p.std),
                };
                let d = ((pm - qm).powi(2) + (ps - qs).powi(2)).sqrt();
                (d, p)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.combo.cmp(&b.1.combo)));
        let mut k = self.k_start.min(order.len());
        loop {
            let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
            for (_, p) in &order[..k] {
                *votes.entry(p.config.as_str()).or_default() += 1;
            }
            if let Some((config, count)) = votes.iter().max_by_key(|(_, c)| **c) {
                if *count * 2 > k {
                    return Ok(config);
                }
            }
            if k == order.len() {
                return Ok(order[0].1.config.as_str());
            }
            k += 1;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let text = fs::read_to_string(path)?;
        let p: ConfigPredictor = serde_json::from_str(&text)?;
        if p.points.is_empty() {
            return Err(PredictorError::EmptyTrainingSet);
        }
        Ok(p)
    }
}

/// Labels every sampled combination with its oracle configuration and
/// assembles the kNN. Training runs in parallel across combinations.
pub fn build_predictor(
    dataset: &EmbeddingDataset,
    sims: &SimilarityMatrix,
    sampled: &[Vec<usize>],
    acc_thr: f64,
    hyper: &HeadHyperparams,
    normalize: bool,
) -> Result<ConfigPredictor, PredictorError> {
    if sampled.is_empty() {
        return Err(PredictorError::EmptyTrainingSet);
    }
    let mut unique: Vec<Vec<usize>> = sampled.to_vec();
    for c in &mut unique {
        c.sort_unstable();
    }
    unique.sort();
    unique.dedup();
    let m = unique[0].len();
    let points: Vec<TrainingPoint> = unique
        .par_iter()
        .map(|combo| -> Result<TrainingPoint, PredictorError> {
            let rep = context_representation(sims, combo)?;
            let oracle = oracle_config(dataset, combo, acc_thr, hyper)?;
            Ok(TrainingPoint {
                combo: combo.clone(),
                mean: rep.mean_sim,
                std: rep.std_sim,
                config: oracle.best_config,
            })
        })
        .collect::<Result<_, _>>()?;
    ConfigPredictor::from_points(m, acc_thr, points, normalize)
}
