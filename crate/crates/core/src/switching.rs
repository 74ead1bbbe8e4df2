//! Runtime context management: change detection, hybrid context switching,
//! LFU head caching and the local-only fallback.
//!
//! On every frame the current micro-classifier's change head is thresholded
//! ([`detect_change`]). On a trigger the all-class model identifies the new
//! class, and if it is genuinely outside the current combination the policy
//! switches context: for every allowed context size `m` it builds a
//! candidate combination around the new class, asks that size's predictor
//! for a configuration, and takes the candidate whose configuration is
//! cheapest, preferring the largest `m` on ties.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::hash::Hash;
use std::sync::Arc;

use thiserror::Error;

use crate::dataset::Manifest;
use crate::heads::{predict, HeadsError, MicroClassifier, PredictionOutcome};
use crate::predictor::{ConfigPredictor, PredictorError};
use crate::selection::ContextKey;
use crate::similarity::{context_representation, SimilarityError, SimilarityMatrix};

#[derive(Debug, Error)]
pub enum SwitchError {
    #[error("class {0} is not covered by any installed micro-classifier")]
    NewClassUncovered(usize),
    #[error("no local head available for context {0:?}")]
    NoLocalHeadAvailable(Vec<usize>),
    #[error("no feasible candidate context for any allowed size")]
    NoFeasibleContext,
    #[error("unknown config `{0}`")]
    UnknownConfig(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
}

/// True iff the change score strictly exceeds the threshold.
pub fn detect_change(outcome: &PredictionOutcome, theta: f64) -> bool {
    outcome.change_score > theta
}

/// Runs the all-class model and returns the identified class index.
pub fn identify_class(
    all_class: &MicroClassifier,
    embedding: &[f64],
) -> Result<usize, SwitchError> {
    Ok(predict(all_class, embedding)?.predicted_class)
}

/// LFU cache with LRU tie-breaking.
///
/// Frequency counts are per key over the whole access history and persist
/// across evictions; with the recency tie-break this makes eviction a fixed
/// priority order, so the hit ratio is non-decreasing in capacity for any
/// replay of the same trace.
#[derive(Debug, Clone)]
pub struct LfuCache<K: Eq + Hash + Clone, V: Clone> {
    capacity: usize,
    entries: HashMap<K, (V, u64)>,
    counts: HashMap<K, u64>,
    tick: u64,
    hits: u64,
    misses: u64,
}

impl<K: Eq + Hash + Clone, V: Clone> LfuCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "cache capacity must be at least 1");
        LfuCache {
            capacity,
            entries: HashMap::new(),
            counts: HashMap::new(),
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contains(&self, key: &K) -> bool {
        self.entries.contains_key(key)
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// Inserts without invoking a loader (used to pre-install entries).
    /// Counts as one access of `key`.
    pub fn admit(&mut self, key: K, value: V) -> Option<K> {
        self.tick += 1;
        *self.counts.entry(key.clone()).or_insert(0) += 1;
        self.entries.insert(key, (value, self.tick));
        self.evict_if_over()
    }

    /// Returns the cached value or loads, admits and possibly evicts.
    /// The boolean is true on a hit. The loaded value is returned even if
    /// the entry itself is immediately evicted.
    pub fn get_or_admit<E>(
        &mut self,
        key: &K,
        loader: impl FnOnce() -> Result<V, E>,
    ) -> Result<(V, bool, Option<K>), E> {
        self.tick += 1;
        *self.counts.entry(key.clone()).or_insert(0) += 1;
        if let Some((value, last)) = self.entries.get_mut(key) {
            *last = self.tick;
            self.hits += 1;
            return Ok((value.clone(), true, None));
        }
        self.misses += 1;
        let value = loader()?;
        self.entries.insert(key.clone(), (value.clone(), self.tick));
        let evicted = self.evict_if_over();
        Ok((value, false, evicted))
    }

    fn evict_if_over(&mut self) -> Option<K> {
        if self.entries.len() <= self.capacity {
            return None;
        }
        let victim = self
            .entries
            .iter()
            .min_by_key(|(key, (_, last))| (self.counts[*key], *last))
            .map(|(key, _)| key.clone())
            .expect("cache over capacity implies non-empty");
        self.entries.remove(&victim);
        Some(victim)
    }
}

/// How the m-1 companion classes of a new context are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaceRule {
    /// Most recently seen distinct classes first (default).
    Recency,
    /// Keep the current classes most similar to the new class, dropping the
    /// farthest ones.
    Farthest,
}

/// Mutable runtime state of the switching policy.
pub struct SwitchState {
    pub combo: Vec<usize>,
    pub config_id: String,
    pub heads: Arc<MicroClassifier>,
    /// Last-seen distinct classes, most recent first.
    recent: VecDeque<usize>,
    recency_capacity: usize,
    pub m_set: BTreeSet<usize>,
    pub cache: LfuCache<ContextKey, Arc<MicroClassifier>>,
    pub replace_rule: ReplaceRule,
}

pub const DEFAULT_RECENCY_CAPACITY: usize = 8;

impl SwitchState {
    pub fn new(
        combo: Vec<usize>,
        config_id: String,
        heads: Arc<MicroClassifier>,
        m_set: BTreeSet<usize>,
        cache_capacity: usize,
    ) -> Self {
        let mut state = SwitchState {
            recent: VecDeque::new(),
            recency_capacity: DEFAULT_RECENCY_CAPACITY,
            m_set,
            cache: LfuCache::new(cache_capacity),
            replace_rule: ReplaceRule::Recency,
            combo,
            config_id,
            heads,
        };
        // The pre-deployed context occupies the cache from the start.
        let key = (state.combo.clone(), state.config_id.clone());
        state.cache.admit(key, Arc::clone(&state.heads));
        state
    }

    /// Records a seen class: moved to the front of the recency list,
    /// duplicates removed, capacity enforced.
    pub fn note_class(&mut self, class: usize) {
        self.recent.retain(|&c| c != class);
        self.recent.push_front(class);
        self.recent.truncate(self.recency_capacity);
    }

    pub fn recent_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.recent.iter().copied()
    }

    /// Candidate combination of size `m` around `new_class`: companions by
    /// the replace rule, padded from the current combination (ascending)
    /// when recency is short. None when fewer than `m` distinct classes are
    /// known.
    pub fn candidate_combo(
        &self,
        new_class: usize,
        m: usize,
        sims: &SimilarityMatrix,
    ) -> Option<Vec<usize>> {
        let mut chosen = vec![new_class];
        let push = |c: usize, chosen: &mut Vec<usize>| {
            if chosen.len() < m && !chosen.contains(&c) {
                chosen.push(c);
            }
        };
        match self.replace_rule {
            ReplaceRule::Recency => {
                for c in self.recent.iter().copied() {
                    push(c, &mut chosen);
                }
                for c in self.combo.iter().copied() {
                    push(c, &mut chosen);
                }
            }
            ReplaceRule::Farthest => {
                let mut pool: Vec<usize> =
                    self.combo.iter().copied().filter(|&c| c != new_class).collect();
                pool.sort_by(|&a, &b| {
                    sims.get(b, new_class)
                        .total_cmp(&sims.get(a, new_class))
                        .then(a.cmp(&b))
                });
                for c in pool {
                    push(c, &mut chosen);
                }
                for c in self.recent.iter().copied() {
                    push(c, &mut chosen);
                }
            }
        }
        if chosen.len() < m {
            return None;
        }
        chosen.sort_unstable();
        Some(chosen)
    }
}

/// A planned context switch, before heads are fetched.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchPlan {
    pub combo: Vec<usize>,
    pub config_id: String,
    pub m: usize,
    pub flops_m: f64,
}

/// Evaluates every allowed context size and picks the candidate whose
/// predicted configuration has minimum FLOPs; equal FLOPs prefer the
/// largest context size.
pub fn plan_switch(
    state: &SwitchState,
    new_class: usize,
    predictors: &BTreeMap<usize, ConfigPredictor>,
    sims: &SimilarityMatrix,
    manifest: &Manifest,
) -> Result<SwitchPlan, SwitchError> {
    let mut best: Option<SwitchPlan> = None;
    for &m in &state.m_set {
        let predictor = predictors
            .get(&m)
            .ok_or(PredictorError::MissingPredictor(m))?;
        let Some(combo) = state.candidate_combo(new_class, m, sims) else {
            continue;
        };
        let rep = context_representation(sims, &combo)?;
        let config_id = predictor.predict_config(rep.mean_sim, rep.std_sim)?.to_string();
        let flops_m = manifest
            .config(&config_id)
            .ok_or_else(|| SwitchError::UnknownConfig(config_id.clone()))?
            .flops_m;
        let better = match &best {
            None => true,
            Some(b) => flops_m < b.flops_m || (flops_m == b.flops_m && m > b.m),
        };
        if better {
            best = Some(SwitchPlan {
                combo,
                config_id,
                m,
                flops_m,
            });
        }
    }
    best.ok_or(SwitchError::NoFeasibleContext)
}

/// Outcome of a completed switch.
#[derive(Debug, Clone)]
pub struct SwitchOutcome {
    pub plan: SwitchPlan,
    /// True when the head pair came from the cache.
    pub cache_hit: bool,
}

/// Cloud-assisted switch: plan, fetch heads through the LFU cache (the
/// loader trains or downloads on a miss), update the state.
pub fn hybrid_switch(
    state: &mut SwitchState,
    new_class: usize,
    predictors: &BTreeMap<usize, ConfigPredictor>,
    sims: &SimilarityMatrix,
    manifest: &Manifest,
    provider: &mut dyn FnMut(&[usize], &str) -> Result<Arc<MicroClassifier>, SwitchError>,
) -> Result<SwitchOutcome, SwitchError> {
    let plan = plan_switch(state, new_class, predictors, sims, manifest)?;
    let key: ContextKey = (plan.combo.clone(), plan.config_id.clone());
    let (heads, cache_hit, _evicted) = state
        .cache
        .get_or_admit(&key, || provider(&plan.combo, &plan.config_id))?;
    state.combo = plan.combo.clone();
    state.config_id = plan.config_id.clone();
    state.heads = heads;
    state.note_class(new_class);
    Ok(SwitchOutcome { plan, cache_hit })
}

/// One pre-installed micro-classifier in unattended mode.
#[derive(Debug, Clone)]
pub struct InstalledEntry {
    pub combo: Vec<usize>,
    pub config_id: String,
    pub flops_m: f64,
    pub heads: Arc<MicroClassifier>,
}

/// Picks the installed combination with the highest class overlap with the
/// desired one, requiring it to contain `new_class`. Ties prefer lower
/// FLOPs, then lexicographic combo order.
pub fn local_fallback<'a>(
    desired: &[usize],
    new_class: usize,
    installed: &'a [InstalledEntry],
) -> Result<&'a InstalledEntry, SwitchError> {
    let eligible: Vec<&InstalledEntry> = installed
        .iter()
        .filter(|e| e.combo.contains(&new_class))
        .collect();
    if eligible.is_empty() {
        return Err(SwitchError::NewClassUncovered(new_class));
    }
    let overlap = |e: &InstalledEntry| e.combo.iter().filter(|c| desired.contains(c)).count();
    Ok(eligible
        .into_iter()
        .max_by(|a, b| {
            overlap(a)
                .cmp(&overlap(b))
                .then_with(|| b.flops_m.total_cmp(&a.flops_m))
                .then_with(|| b.combo.cmp(&a.combo))
        })
        .expect("eligible non-empty"))
}

/// Unattended switch. Stage one applies the hybrid policy over desired
/// candidates that are installed verbatim; when none is, stage two picks
/// per size the best-overlap installed entry and applies the hybrid tie
/// rule (min FLOPs, then largest context) over those.
pub fn local_switch<'a>(
    state: &SwitchState,
    new_class: usize,
    sims: &SimilarityMatrix,
    installed: &'a [InstalledEntry],
) -> Result<&'a InstalledEntry, SwitchError> {
    let mut desired: Vec<Vec<usize>> = Vec::new();
    for &m in &state.m_set {
        if let Some(combo) = state.candidate_combo(new_class, m, sims) {
            desired.push(combo);
        }
    }
    if desired.is_empty() {
        return Err(SwitchError::NoFeasibleContext);
    }
    let pick = |entries: Vec<&'a InstalledEntry>| -> Option<&'a InstalledEntry> {
        entries.into_iter().min_by(|a, b| {
            a.flops_m
                .total_cmp(&b.flops_m)
                .then_with(|| b.combo.len().cmp(&a.combo.len()))
                .then_with(|| a.combo.cmp(&b.combo))
        })
    };
    let exact: Vec<&InstalledEntry> = installed
        .iter()
        .filter(|e| desired.iter().any(|d| *d == e.combo))
        .collect();
    if let Some(entry) = pick(exact) {
        return Ok(entry);
    }
    let mut finalists: Vec<&InstalledEntry> = Vec::new();
    for d in &desired {
        if let Ok(entry) = local_fallback(d, new_class, installed) {
            finalists.push(entry);
        }
    }
    if finalists.is_empty() {
        return Err(SwitchError::NewClassUncovered(new_class));
    }
    Ok(pick(finalists).expect("finalists non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::TrainingPoint;

    fn outcome(score: f64) -> PredictionOutcome {
        PredictionOutcome {
            class_probs: vec![1.0],
            predicted_class: 0,
            change_score: score,
        }
    }

    #[test]
    fn detect_change_boundaries() {
        assert!(detect_change(&outcome(0.7), 0.5));
        assert!(!detect_change(&outcome(0.5), 0.5)); // strict inequality
        assert!(!detect_change(&outcome(0.0), 0.5));
        assert!(!detect_change(&outcome(1.0), 1.0)); // theta=1 never triggers
        assert!(detect_change(&outcome(1e-9), 0.0)); // theta=0, any positive
        assert!(!detect_change(&outcome(0.0), 0.0));
    }

    #[test]
    fn identify_uniform_logits_breaks_ties_low() {
        let all = MicroClassifier::zeroed("full", &[0, 1, 2, 3], 4, 8, 0.5);
        assert_eq!(identify_class(&all, &[0.3, -1.0, 2.0, 0.0]).unwrap(), 0);
        assert!(matches!(
            identify_class(&all, &[0.3, -1.0]),
            Err(SwitchError::Heads(HeadsError::DimensionMismatch { .. }))
        ));
    }

    fn load(v: u32) -> impl FnOnce() -> Result<u32, SwitchError> {
        move || Ok(v)
    }

    #[test]
    fn lfu_capacity_one_evicts_older_tie() {
        let mut cache: LfuCache<&str, u32> = LfuCache::new(1);
        cache.get_or_admit(&"a", load(1)).unwrap();
        let (_, hit, evicted) = cache.get_or_admit(&"b", load(2)).unwrap();
        assert!(!hit);
        assert_eq!(evicted, Some("a"));
        assert!(cache.contains(&"b"));
    }

    #[test]
    fn lfu_frequency_beats_recency() {
        let mut cache: LfuCache<&str, u32> = LfuCache::new(1);
        for _ in 0..3 {
            cache.get_or_admit(&"a", load(1)).unwrap();
        }
        // "b" is admitted but is the least frequent entry, so it is evicted
        // immediately; the returned value is still usable.
        let (v, hit, evicted) = cache.get_or_admit(&"b", load(2)).unwrap();
        assert_eq!((v, hit), (2, false));
        assert_eq!(evicted, Some("b"));
        assert!(cache.contains(&"a"));
    }

    #[test]
    fn lfu_hits_never_evict() {
        let mut cache: LfuCache<&str, u32> = LfuCache::new(2);
        cache.get_or_admit(&"a", load(1)).unwrap();
        cache.get_or_admit(&"b", load(2)).unwrap();
        for _ in 0..10 {
            let (_, hit, evicted) = cache.get_or_admit(&"a", load(1)).unwrap();
            assert!(hit);
            assert_eq!(evicted, None);
        }
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.hits(), 10);
        assert_eq!(cache.misses(), 2);
    }

    fn singleton_predictor(m: usize, config: &str) -> ConfigPredictor {
        ConfigPredictor::from_points(
            m,
            0.9,
            vec![TrainingPoint {
                combo: (0..m).collect(),
                mean: 0.0,
                std: 0.0,
                config: config.to_string(),
            }],
            false,
        )
        .unwrap()
    }

    fn test_manifest() -> Manifest {
        use crate::dataset::synth::{synthesize_gaussian_dataset, GaussianSpec, SynthConfig};
        // Flops: c0=20, c1=20, c2=35 — ids map to predictor answers below.
        let ds = synthesize_gaussian_dataset(&GaussianSpec {
            n_classes: 6,
            dim: 2,
            cluster_spread: 0.5,
            center_distances: crate::dataset::synth::circle_distances(6, 10.0),
            samples_per_class: 4,
            configs: vec![
                SynthConfig { flops_m: 20.0, noise_scale: 0.5 },
                SynthConfig { flops_m: 20.0, noise_scale: 0.4 },
                SynthConfig { flops_m: 35.0, noise_scale: 0.3 },
            ],
            seed: 5,
        })
        .unwrap();
        ds.manifest
    }

    fn uniform_sims(n: usize) -> SimilarityMatrix {
        SimilarityMatrix::from_values("ref", vec![vec![0.5; n]; n])
    }

    #[test]
    fn hybrid_prefers_largest_context_at_min_flops() {
        let manifest = test_manifest();
        let sims = uniform_sims(6);
        let heads = Arc::new(MicroClassifier::zeroed("c0", &[0, 1], 2, 4, 0.5));
        let mut state = SwitchState::new(
            vec![0, 1],
            "c0".to_string(),
            heads,
            BTreeSet::from([2, 3, 4]),
            8,
        );
        state.note_class(0);
        state.note_class(1);
        state.note_class(2);
        // m=2 -> c0 (20), m=3 -> c1 (20), m=4 -> c2 (35): largest size at
        // the minimum FLOPs wins, so m=3.
        let predictors = BTreeMap::from([
            (2, singleton_predictor(2, "c0")),
            (3, singleton_predictor(3, "c1")),
            (4, singleton_predictor(4, "c2")),
        ]);
        let plan = plan_switch(&state, 5, &predictors, &sims, &manifest).unwrap();
        assert_eq!(plan.m, 3);
        assert_eq!(plan.config_id, "c1");
        assert!(plan.combo.contains(&5));
    }

    #[test]
    fn singleton_m_set_gives_fixed_size() {
        let manifest = test_manifest();
        let sims = uniform_sims(6);
        let heads = Arc::new(MicroClassifier::zeroed("c0", &[0, 1, 2], 2, 4, 0.5));
        let mut state = SwitchState::new(
            vec![0, 1, 2],
            "c0".to_string(),
            heads,
            BTreeSet::from([3]),
            8,
        );
        state.note_class(1);
        let predictors = BTreeMap::from([(3, singleton_predictor(3, "c0"))]);
        let plan = plan_switch(&state, 4, &predictors, &sims, &manifest).unwrap();
        assert_eq!(plan.m, 3);
        assert_eq!(plan.combo.len(), 3);
    }

    #[test]
    fn short_recency_pads_from_current_combo() {
        let sims = uniform_sims(6);
        let heads = Arc::new(MicroClassifier::zeroed("c0", &[0, 1, 2], 2, 4, 0.5));
        let state = SwitchState::new(
            vec![0, 1, 2],
            "c0".to_string(),
            heads,
            BTreeSet::from([4]),
            8,
        );
        // recency empty: candidate = {5} + padding from combo [0,1,2].
        let combo = state.candidate_combo(5, 4, &sims).unwrap();
        assert_eq!(combo, vec![0, 1, 2, 5]);
    }

    #[test]
    fn hybrid_switch_updates_state_and_cache() {
        let manifest = test_manifest();
        let sims = uniform_sims(6);
        let heads = Arc::new(MicroClassifier::zeroed("c0", &[0, 1], 2, 4, 0.5));
        let mut state = SwitchState::new(
            vec![0, 1],
            "c0".to_string(),
            heads,
            BTreeSet::from([2]),
            8,
        );
        let predictors = BTreeMap::from([(2, singleton_predictor(2, "c0"))]);
        let mut trained = 0;
        let mut provider = |combo: &[usize], config: &str| {
            trained += 1;
            Ok(Arc::new(MicroClassifier::zeroed(config, combo, 2, 4, 0.5)))
        };
        let out =
            hybrid_switch(&mut state, 3, &predictors, &sims, &manifest, &mut provider).unwrap();
        assert!(!out.cache_hit);
        assert!(state.combo.contains(&3));
        // Same context again: served from cache.
        state.combo = vec![0, 1];
        let out2 =
            hybrid_switch(&mut state, 3, &predictors, &sims, &manifest, &mut provider).unwrap();
        assert!(out2.cache_hit);
        assert_eq!(trained, 1);
    }

    fn installed(combo: &[usize], config: &str, flops: f64) -> InstalledEntry {
        InstalledEntry {
            combo: combo.to_vec(),
            config_id: config.to_string(),
            flops_m: flops,
            heads: Arc::new(MicroClassifier::zeroed(config, combo, 2, 4, 0.5)),
        }
    }

    #[test]
    fn fallback_examples() {
        let set = vec![installed(&[1, 9], "c0", 5.0), installed(&[7, 8, 9], "c1", 9.0)];
        let best = local_fallback(&[1, 2, 9], 9, &set).unwrap();
        assert_eq!(best.combo, vec![1, 9]);

        let set = vec![installed(&[1, 2, 3], "c0", 5.0), installed(&[4, 5, 6], "c1", 5.0)];
        assert!(matches!(
            local_fallback(&[1, 2, 9], 9, &set),
            Err(SwitchError::NewClassUncovered(9))
        ));

        let set = vec![installed(&[1, 2, 9], "c0", 5.0)];
        let best = local_fallback(&[1, 2, 9], 9, &set).unwrap();
        assert_eq!(best.combo, vec![1, 2, 9]);
    }

    #[test]
    fn local_switch_prefers_exact_installed_context() {
        let sims = uniform_sims(6);
        let heads = Arc::new(MicroClassifier::zeroed("c0", &[0, 1], 2, 4, 0.5));
        let mut state = SwitchState::new(
            vec![0, 1],
            "c0".to_string(),
            heads,
            BTreeSet::from([2, 3]),
            8,
        );
        state.note_class(0);
        state.note_class(1);
        // Desired for m=2: [1, 4] (recency [1, 0] -> companion 1).
        let set = vec![
            installed(&[1, 4], "c1", 7.0),
            installed(&[0, 4], "c0", 3.0),
            installed(&[2, 4, 5], "c2", 9.0),
        ];
        let best = local_switch(&state, 4, &sims, &set).unwrap();
        assert_eq!(best.combo, vec![1, 4]);
        // Without an exact match, overlap + min flops decides.
        let set = vec![installed(&[2, 4], "c0", 3.0), installed(&[3, 4, 5], "c2", 9.0)];
        let best = local_switch(&state, 4, &sims, &set).unwrap();
        assert_eq!(best.combo, vec![2, 4]);
    }

    #[test]
    fn cache_hit_ratio_monotone_in_capacity() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(404);
        for _ in 0..20 {
            let trace: Vec<u8> = (0..200).map(|_| rng.gen_range(0..12u8)).collect();
            let mut last_ratio = -1.0;
            for capacity in 1..=12 {
                let mut cache: LfuCache<u8, u8> = LfuCache::new(capacity);
                for &k in &trace {
                    cache.get_or_admit(&k, || Ok::<u8, ()>(k)).unwrap();
                }
                let ratio = cache.hits() as f64 / trace.len() as f64;
                assert!(
                    ratio >= last_ratio - 1e-12,
                    "hit ratio fell from {last_ratio} to {ratio} at capacity {capacity}"
                );
                last_ratio = ratio;
            }
        }
    }
}
