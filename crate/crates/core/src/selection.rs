//! Budget-limited micro-classifier set selection.
//!
//! For unattended deployments the device holds `n` head pairs chosen from
//! the kNN-predicted candidates. Candidates are ranked by expected FLOPs
//! per frame (the trigger process makes a cheap classifier with a high
//! false-positive rate expensive), then a two-stage greedy picks the set:
//! stage one minimizes average expected FLOPs under full class coverage
//! without training anything, stage two trains the members and swaps the
//! weakest until the accuracy criterion is met.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{head_pair_param_count, HeadsError};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("{name} = {value} outside [0, 1]")]
    RateOutOfRange { name: &'static str, value: f64 },
    #[error("FLOPs must be positive, got {0}")]
    BadFlops(f64),
    #[error("coverage infeasible: {0}")]
    CoverageInfeasible(String),
    #[error("no candidate can raise the accuracy criterion to the threshold")]
    ExhaustedCandidates,
    #[error("trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Heads(#[from] HeadsError),
}

/// Expected per-frame computation of a deployed micro-classifier with FLOPs
/// `f_i`, given the full-class model cost, the context change rate and the
/// detector's error rates. A false positive pays for the full model on an
/// in-context frame; a false negative skips it on a change frame.
pub fn expected_flops(
    f_i: f64,
    f_full: f64,
    ccr: f64,
    fpr: f64,
    fnr: f64,
) -> Result<f64, SelectionError> {
    for (name, value) in [("CCR", ccr), ("FPR", fpr), ("FNR", fnr)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(SelectionError::RateOutOfRange { name, value });
        }
    }
    for f in [f_i, f_full] {
        if !(f > 0.0) {
            return Err(SelectionError::BadFlops(f));
        }
    }
    Ok(ccr * (fnr * f_i + (1.0 - fnr) * (f_i + f_full))
        + (1.0 - ccr) * (fpr * (f_i + f_full) + (1.0 - fpr) * f_i))
}

/// One selectable micro-classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub combo: Vec<usize>,
    pub config_id: String,
    /// Expected FLOPs ranking key (see [`expected_flops`]).
    pub flops: f64,
    /// Known validation accuracy, if the candidate was already trained.
    pub accuracy: Option<f64>,
}

/// The candidate pool plus the selection constraints.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// Sorted ascending by `flops` on construction.
    pub candidates: Vec<Candidate>,
    /// Number of micro-classifiers the device can hold.
    pub n: usize,
    /// Number of classes that must be covered (class indices 0..coverage).
    pub coverage: usize,
}

impl CandidateSet {
    pub fn new(mut candidates: Vec<Candidate>, n: usize, coverage: usize) -> Self {
        candidates.sort_by(|a, b| {
            a.flops
                .total_cmp(&b.flops)
                .then_with(|| a.combo.cmp(&b.combo))
                .then_with(|| a.config_id.cmp(&b.config_id))
        });
        CandidateSet {
            candidates,
            n,
            coverage,
        }
    }
}

/// Stage-2 acceptance criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccuracyCriterion {
    Average,
    Minimum,
}

/// Replacement history; indices refer to the sorted candidate list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AuditEvent {
    Init {
        members: Vec<usize>,
        avg_flops: f64,
    },
    ComputeSwap {
        removed: usize,
        inserted: usize,
        avg_flops: f64,
    },
    AccuracySwap {
        removed: usize,
        inserted: usize,
        criterion_accuracy: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    /// Chosen candidate indices, ascending.
    pub members: Vec<usize>,
    pub avg_flops: f64,
    /// Trained accuracy per candidate index (stage 2 fills this in).
    pub accuracies: BTreeMap<usize, f64>,
    pub audit: Vec<AuditEvent>,
}

fn covers(set: &CandidateSet, members: &[usize]) -> bool {
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    for &i in members {
        seen.extend(set.candidates[i].combo.iter().copied());
    }
    (0..set.coverage).all(|c| seen.contains(&c))
}

fn avg_flops(set: &CandidateSet, members: &[usize]) -> f64 {
    members.iter().map(|&i| set.candidates[i].flops).sum::<f64>() / members.len() as f64
}

const INIT_DRAWS: usize = 1000;

/// Seeded covering initialization: up to 1000 random n-subsets are drawn
/// and the covering one with the lowest average FLOPs is kept.
fn initialize(set: &CandidateSet, seed: u64) -> Result<Vec<usize>, SelectionError> {
    let max_m = set
        .candidates
        .iter()
        .map(|c| c.combo.len())
        .max()
        .unwrap_or(0);
    if max_m == 0 || set.n * max_m < set.coverage {
        return Err(SelectionError::CoverageInfeasible(format!(
            "{} slots of size <= {max_m} cannot cover {} classes",
            set.n, set.coverage
        )));
    }
    if set.candidates.len() < set.n {
        return Err(SelectionError::CoverageInfeasible(format!(
            "need {} candidates, have {}",
            set.n,
            set.candidates.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut indices: Vec<usize> = (0..set.candidates.len()).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..INIT_DRAWS {
        indices.shuffle(&mut rng);
        let mut draw: Vec<usize> = indices[..set.n].to_vec();
        draw.sort_unstable();
        if covers(set, &draw) {
            let avg = avg_flops(set, &draw);
            if best.as_ref().map_or(true, |(b, _)| avg < *b) {
                best = Some((avg, draw));
            }
        }
    }
    best.map(|(_, m)| m).ok_or_else(|| {
        SelectionError::CoverageInfeasible(format!(
            "no covering initialization found in {INIT_DRAWS} draws"
        ))
    })
}

/// Two-stage greedy selection.
///
/// Stage 1 repeatedly replaces the highest-FLOPs member with the lightest
/// strictly-lighter non-member that preserves coverage, until the average
/// stops decreasing. Stage 2 trains members via `trainer` and, while the
/// accuracy criterion is below `acc_thr`, replaces the least accurate
/// member with the lightest untried candidate that trains to a higher
/// accuracy and preserves coverage.
pub fn greedy_select(
    set: &CandidateSet,
    acc_thr: f64,
    criterion: AccuracyCriterion,
    seed: u64,
    trainer: &mut dyn FnMut(&Candidate) -> Result<f64, SelectionError>,
) -> Result<Selection, SelectionError> {
    let mut members = initialize(set, seed)?;
    let mut audit = vec![AuditEvent::Init {
        members: members.clone(),
        avg_flops: avg_flops(set, &members),
    }];

    // Stage 1: minimize average expected FLOPs under coverage.
    loop {
        let &worst = members
            .iter()
            .max_by(|&&a, &&b| {
                set.candidates[a]
                    .flops
                    .total_cmp(&set.candidates[b].flops)
                    .then(a.cmp(&b))
            })
            .expect("members non-empty");
        let mut swapped = false;
        for i in 0..worst {
            if members.contains(&i) {
                continue;
            }
            if set.candidates[i].flops >= set.candidates[worst].flops {
                break; // sorted: nothing lighter remains before `worst`
            }
            let mut trial: Vec<usize> =
                members.iter().copied().filter(|&m| m != worst).collect();
            trial.push(i);
            trial.sort_unstable();
            if covers(set, &trial) {
                members = trial;
                audit.push(AuditEvent::ComputeSwap {
                    removed: worst,
                    inserted: i,
                    avg_flops: avg_flops(set, &members),
                });
                swapped = true;
                break;
            }
        }
        if !swapped {
            break;
        }
    }

    // Stage 2: raise the accuracy criterion to the threshold.
    let mut accuracies: BTreeMap<usize, f64> = BTreeMap::new();
    let train = |i: usize,
                     accuracies: &mut BTreeMap<usize, f64>,
                     trainer: &mut dyn FnMut(&Candidate) -> Result<f64, SelectionError>|
     -> Result<f64, SelectionError> {
        if let Some(acc) = accuracies.get(&i) {
            return Ok(*acc);
        }
        if let Some(acc) = set.candidates[i].accuracy {
            accuracies.insert(i, acc);
            return Ok(acc);
        }
        let acc = trainer(&set.candidates[i])?;
        accuracies.insert(i, acc);
        Ok(acc)
    };

    if acc_thr > 0.0 {
        for &i in &members {
            train(i, &mut accuracies, trainer)?;
        }
        loop {
            let crit = match criterion {
                AccuracyCriterion::Average => {
                    members.iter().map(|i| accuracies[i]).sum::<f64>() / members.len() as f64
                }
                AccuracyCriterion::Minimum => members
                    .iter()
                    .map(|i| accuracies[i])
                    .fold(f64::INFINITY, f64::min),
            };
            if crit >= acc_thr {
                break;
            }
            let &weakest = members
                .iter()
                .min_by(|&&a, &&b| accuracies[&a].total_cmp(&accuracies[&b]).then(a.cmp(&b)))
                .expect("members non-empty");
            let weakest_acc = accuracies[&weakest];
            let mut swapped = false;
            for i in 0..set.candidates.len() {
                if members.contains(&i) {
                    continue;
                }
                let mut trial: Vec<usize> =
                    members.iter().copied().filter(|&m| m != weakest).collect();
                trial.push(i);
                trial.sort_unstable();
                if !covers(set, &trial) {
                    continue;
                }
                let acc = train(i, &mut accuracies, trainer)?;
                if acc > weakest_acc {
                    members = trial;
                    let crit_after = match criterion {
                        AccuracyCriterion::Average => {
                            members.iter().map(|i| accuracies[i]).sum::<f64>()
                                / members.len() as f64
                        }
                        AccuracyCriterion::Minimum => members
                            .iter()
                            .map(|i| accuracies[i])
                            .fold(f64::INFINITY, f64::min),
                    };
                    audit.push(AuditEvent::AccuracySwap {
                        removed: weakest,
                        inserted: i,
                        criterion_accuracy: crit_after,
                    });
                    swapped = true;
                    break;
                }
            }
            if !swapped {
                return Err(SelectionError::ExhaustedCandidates);
            }
        }
    }

    Ok(Selection {
        avg_flops: avg_flops(set, &members),
        members,
        accuracies,
        audit,
    })
}

/// A context instantiation: the combination plus the configuration it ran
/// with.
pub type ContextKey = (Vec<usize>, String);

/// The `k` most frequently used contexts of a trace; frequency ties break
/// by earlier first occurrence.
pub fn topk_frequent(trace: &[ContextKey], k: usize) -> Result<Vec<ContextKey>, SelectionError> {
    if trace.is_empty() {
        return Err(SelectionError::EmptyTrace);
    }
    let mut stats: HashMap<&ContextKey, (usize, usize)> = HashMap::new();
    for (pos, key) in trace.iter().enumerate() {
        let entry = stats.entry(key).or_insert((0, pos));
        entry.0 += 1;
    }
    let mut ranked: Vec<(&ContextKey, usize, usize)> =
        stats.into_iter().map(|(k, (c, f))| (k, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(key, _, _)| key.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageMode {
    Cloud,
    Unattended,
}

/// Byte-level storage accounting: one feature extractor per configuration
/// (shared by all heads of that size), one head pair per selected context,
/// plus the all-class model in unattended mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StorageModel {
    /// Feature-extractor bytes per config id (all stored on device).
    pub extractor_bytes: BTreeMap<String, u64>,
    /// Embedding dimension per config id.
    pub embedding_dims: BTreeMap<String, usize>,
    pub all_class_bytes: u64,
    pub hidden_dim: usize,
    pub param_bytes_per_weight: u64,
}

impl StorageModel {
    pub fn head_pair_bytes(&self, config_id: &str, m: usize) -> u64 {
        let d = self.embedding_dims.get(config_id).copied().unwrap_or(0);
        head_pair_param_count(d, self.hidden_dim, m) as u64 * self.param_bytes_per_weight
    }
}

/// Total bytes for a selected set of `(config_id, m)` head pairs.
pub fn storage_footprint(
    selected: &[(String, usize)],
    storage: &StorageModel,
    mode: StorageMode,
) -> u64 {
    let extractors: u64 = storage.extractor_bytes.values().sum();
    let heads: u64 = selected
        .iter()
        .map(|(config_id, m)| storage.head_pair_bytes(config_id, *m))
        .sum();
    let all_class = match mode {
        StorageMode::Cloud => 0,
        StorageMode::Unattended => storage.all_class_bytes,
    };
    extractors + heads + all_class
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn expected_flops_examples() {
        // No changes, no false positives: just the classifier.
        assert_eq!(expected_flops(10.0, 100.0, 0.0, 0.0, 0.2).unwrap(), 10.0);
        // Always a change, never missed: classifier plus full model.
        assert_eq!(expected_flops(10.0, 100.0, 1.0, 0.3, 0.0).unwrap(), 110.0);
        // Direct substitution.
        let f = expected_flops(10.0, 100.0, 0.1, 0.1, 0.1).unwrap();
        assert!((f - 28.0).abs() < 1e-12, "got {f}");
        assert!(matches!(
            expected_flops(10.0, 100.0, 1.5, 0.0, 0.0),
            Err(SelectionError::RateOutOfRange { name: "CCR", .. })
        ));
        assert!(matches!(
            expected_flops(0.0, 100.0, 0.5, 0.0, 0.0),
            Err(SelectionError::BadFlops(_))
        ));
    }

    proptest! {
        // Partial-derivative sign checks. CCR monotonicity needs a sane
        // detector (FPR + FNR < 1); FPR monotonicity is strict below CCR=1.
        #[test]
        fn expected_flops_partials(
            f_i in 1.0..100.0f64,
            f_full in 1.0..1000.0f64,
            ccr in 0.0..0.99f64,
            fpr in 0.0..0.49f64,
            fnr in 0.0..0.49f64,
            eps in 0.001..0.01f64,
        ) {
            let base = expected_flops(f_i, f_full, ccr, fpr, fnr).unwrap();
            let up_fpr = expected_flops(f_i, f_full, ccr, fpr + eps, fnr).unwrap();
            prop_assert!(up_fpr > base);
            let up_ccr = expected_flops(f_i, f_full, ccr + eps, fpr, fnr).unwrap();
            prop_assert!(up_ccr > base);
            if ccr > 0.0 {
                let up_fnr = expected_flops(f_i, f_full, ccr, fpr, fnr + eps).unwrap();
                prop_assert!(up_fnr < base);
            }
        }
    }

    fn cand(combo: &[usize], flops: f64) -> Candidate {
        Candidate {
            combo: combo.to_vec(),
            config_id: "c0".to_string(),
            flops,
            accuracy: None,
        }
    }

    fn no_train(_: &Candidate) -> Result<f64, SelectionError> {
        panic!("stage 2 should not train in this test");
    }

    #[test]
    fn greedy_finds_light_cover() {
        let set = CandidateSet::new(
            vec![
                cand(&[0, 1], 5.0),
                cand(&[2, 3], 6.0),
                cand(&[0, 2], 1.0),
                cand(&[1, 3], 2.0),
            ],
            2,
            4,
        );
        let sel = greedy_select(&set, 0.0, AccuracyCriterion::Average, 42, &mut no_train).unwrap();
        let combos: Vec<&[usize]> = sel
            .members
            .iter()
            .map(|&i| set.candidates[i].combo.as_slice())
            .collect();
        assert!(combos.contains(&&[0usize, 2][..]));
        assert!(combos.contains(&&[1usize, 3][..]));
        assert!((sel.avg_flops - 1.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_infeasible_when_too_few_slots() {
        let set = CandidateSet::new(vec![cand(&[0, 1], 1.0), cand(&[2, 3], 2.0)], 1, 4);
        assert!(matches!(
            greedy_select(&set, 0.0, AccuracyCriterion::Average, 1, &mut no_train),
            Err(SelectionError::CoverageInfeasible(_))
        ));
    }

    #[test]
    fn zero_threshold_skips_stage_two() {
        let set = CandidateSet::new(
            vec![cand(&[0, 1], 1.0), cand(&[1, 2], 2.0), cand(&[0, 2], 3.0)],
            2,
            3,
        );
        let sel = greedy_select(&set, 0.0, AccuracyCriterion::Average, 7, &mut no_train).unwrap();
        assert!(sel.accuracies.is_empty());
    }

    #[test]
    fn stage_one_invariants_hold_in_audit() {
        let mut cands = Vec::new();
        // 6 classes, all 15 pairs, varied flops.
        let flops = [9.0, 3.0, 7.0, 1.0, 8.0, 2.0, 6.0, 4.0, 5.0, 10.0, 2.5, 3.5, 7.5, 1.5, 9.5];
        let mut idx = 0;
        for a in 0..6 {
            for b in (a + 1)..6 {
                cands.push(cand(&[a, b], flops[idx]));
                idx += 1;
            }
        }
        let set = CandidateSet::new(cands, 4, 6);
        let sel = greedy_select(&set, 0.0, AccuracyCriterion::Average, 3, &mut no_train).unwrap();
        let mut last_avg = f64::INFINITY;
        let mut members: Vec<usize> = Vec::new();
        for event in &sel.audit {
            match event {
                AuditEvent::Init { members: m, avg_flops } => {
                    members = m.clone();
                    last_avg = *avg_flops;
                    assert!(covers(&set, &members));
                }
                AuditEvent::ComputeSwap { removed, inserted, avg_flops } => {
                    members.retain(|m| m != removed);
                    members.push(*inserted);
                    members.sort_unstable();
                    assert!(covers(&set, &members), "coverage lost after swap");
                    assert!(*avg_flops < last_avg, "average did not decrease");
                    last_avg = *avg_flops;
                }
                AuditEvent::AccuracySwap { .. } => unreachable!(),
            }
        }
        assert_eq!(members, sel.members);
    }

    #[test]
    fn stage_two_replaces_weak_members() {
        // Table-driven accuracies: the cheapest pair is weak.
        let acc = |c: &Candidate| -> f64 {
            match (c.combo.as_slice(), c.flops as i64) {
                (_, 1) => 0.5,
                _ => 0.95,
            }
        };
        let set = CandidateSet::new(
            vec![
                cand(&[0, 1], 1.0),
                cand(&[0, 1], 4.0),
                cand(&[1, 2], 2.0),
                cand(&[0, 2], 3.0),
            ],
            2,
            3,
        );
        let mut trainer = |c: &Candidate| Ok(acc(c));
        let sel =
            greedy_select(&set, 0.9, AccuracyCriterion::Average, 5, &mut trainer).unwrap();
        let min_acc = sel
            .members
            .iter()
            .map(|i| sel.accuracies[i])
            .fold(f64::INFINITY, f64::min);
        let avg_acc = sel.members.iter().map(|i| sel.accuracies[i]).sum::<f64>()
            / sel.members.len() as f64;
        assert!(avg_acc >= 0.9, "avg accuracy {avg_acc}");
        assert!(min_acc >= 0.9);
        assert!(covers(&set, &sel.members));
    }

    #[test]
    fn stage_two_exhaustion_is_an_error() {
        let set = CandidateSet::new(
            vec![cand(&[0, 1], 1.0), cand(&[1, 2], 2.0), cand(&[0, 2], 3.0)],
            2,
            3,
        );
        let mut trainer = |_: &Candidate| Ok(0.5);
        assert!(matches!(
            greedy_select(&set, 0.9, AccuracyCriterion::Average, 5, &mut trainer),
            Err(SelectionError::ExhaustedCandidates)
        ));
    }

    fn key(combo: &[usize]) -> ContextKey {
        (combo.to_vec(), "c0".to_string())
    }

    #[test]
    fn topk_counts_and_ties() {
        let mut trace = Vec::new();
        for _ in 0..10 {
            trace.push(key(&[0, 1]));
        }
        for _ in 0..3 {
            trace.push(key(&[1, 2]));
        }
        assert_eq!(topk_frequent(&trace, 1).unwrap(), vec![key(&[0, 1])]);
        // k saturates at the number of distinct contexts.
        assert_eq!(topk_frequent(&trace, 10).unwrap().len(), 2);
        // Tie at rank k: earlier first occurrence wins.
        let trace = vec![key(&[4, 5]), key(&[2, 3]), key(&[4, 5]), key(&[2, 3])];
        assert_eq!(topk_frequent(&trace, 1).unwrap(), vec![key(&[4, 5])]);
        assert!(matches!(
            topk_frequent(&[], 1),
            Err(SelectionError::EmptyTrace)
        ));
    }

    fn storage_fixture() -> StorageModel {
        let mut extractor_bytes = BTreeMap::new();
        let mut embedding_dims = BTreeMap::new();
        for i in 0..4 {
            extractor_bytes.insert(format!("c{i}"), 1_000_000);
            embedding_dims.insert(format!("c{i}"), 1280);
        }
        StorageModel {
            extractor_bytes,
            embedding_dims,
            all_class_bytes: 4_800_000,
            hidden_dim: 64,
            param_bytes_per_weight: 4,
        }
    }

    #[test]
    fn storage_examples() {
        let storage = storage_fixture();
        assert_eq!(
            storage_footprint(&[], &storage, StorageMode::Cloud),
            4_000_000
        );
        assert_eq!(storage.head_pair_bytes("c0", 3), 656_912);
        assert_eq!(
            storage_footprint(
                &[("c0".to_string(), 3)],
                &storage,
                StorageMode::Cloud
            ),
            4_000_000 + 656_912
        );
        assert_eq!(
            storage_footprint(&[], &storage, StorageMode::Unattended),
            4_000_000 + 4_800_000
        );
    }
}
