//! Deterministic trace-driven evaluation of the full pipeline.
//!
//! A [`FrameTrace`] is a synthesized sequence of contexts, each persisting
//! for a fixed interval of frames drawn from the dataset; consecutive
//! contexts differ by exactly one class, and the first frame of every new
//! context carries the entering class (a context change is realized by the
//! first frame of the new class).
//!
//! [`run`] executes the trace frame by frame, charging integer-nanosecond
//! latencies for device inference, uplink of triggered frames, all-class
//! inference and head-pair downloads, so the breakdown sums to the total
//! exactly. The inference backend is either the trained heads or an ideal
//! oracle (perfect detector, labels and switches) used for conservation
//! checks and for collecting context-usage traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EmbeddingDataset, Manifest};
use crate::heads::{
    head_pair_param_count, predict, train_heads, HeadHyperparams, HeadsError, MicroClassifier,
    PredictionOutcome,
};
use crate::predictor::{ConfigPredictor, PredictorError};
use crate::rng::{derive_seed, rng_from_seed};
use crate::selection::ContextKey;
use crate::similarity::{context_representation, SimilarityError, SimilarityMatrix};
use crate::switching::{
    detect_change, hybrid_switch, identify_class, local_fallback, local_switch, InstalledEntry,
    SwitchError, SwitchState,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("per-frame log is disabled")]
    LogDisabled,
    #[error("device `{device}` has no latency entry for config `{config}`")]
    UnknownDevice { device: String, config: String },
    #[error("unknown config `{0}`")]
    UnknownConfig(String),
    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<SimError>,
    },
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cloud,
    Local,
}

/// Simulation knobs. `context_interval` is frames per context, so the
/// context change rate is `1 / context_interval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: Mode,
    pub device: String,
    pub data_rate_mbps: f64,
    pub context_interval: usize,
    pub theta: f64,
    pub m_set: Vec<usize>,
    pub cache_capacity: usize,
    /// Uplink payload per triggered frame.
    pub frame_bytes: u64,
    /// Cloud-side compute per triggered frame (cloud mode only).
    pub cloud_ms: f64,
    pub seed: u64,
    pub per_frame_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: Mode::Cloud,
            device: "pi0".to_string(),
            data_rate_mbps: 3.0,
            context_interval: 30,
            theta: 0.5,
            m_set: vec![2, 3, 4],
            cache_capacity: 8,
            frame_bytes: 30_000,
            cloud_ms: 0.0,
            seed: 42,
            per_frame_log: false,
        }
    }
}

/// Milliseconds to push `bytes` through a link of `rate_mbps` megabits/s.
pub fn transmission_ms(bytes: u64, rate_mbps: f64) -> f64 {
    assert!(rate_mbps > 0.0, "data rate must be positive");
    bytes as f64 * 8.0 / (rate_mbps * 1e6) * 1e3
}

fn transmission_ns(bytes: u64, rate_mbps: f64) -> u64 {
    (bytes as f64 * 8000.0 / rate_mbps).round() as u64
}

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Frame {
    pub sample_id: String,
    pub class_index: usize,
}

/// A synthesized temporal test sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameTrace {
    pub split: String,
    pub frames: Vec<Frame>,
    /// Declared context per segment; consecutive combos differ by one class.
    pub contexts: Vec<Vec<usize>>,
    /// Start frame index of each context; `boundaries[0] == 0`.
    pub boundaries: Vec<usize>,
}

impl FrameTrace {
    /// Number of realized context changes (transitions).
    pub fn n_changes(&self) -> usize {
        self.contexts.len().saturating_sub(1)
    }
}

/// Synthesizes a random walk of `n_changes + 1` contexts where each step
/// replaces exactly one class. Every context persists `interval` frames of
/// seeded random samples from its classes (class first, then sample); the
/// first frame of every new context is the entering class.
pub fn synthesize_sequence(
    dataset: &EmbeddingDataset,
    split: &str,
    m: usize,
    n_changes: usize,
    interval: usize,
    seed: u64,
) -> Result<FrameTrace, SimError> {
    let n = dataset.manifest.num_classes();
    if m >= n {
        return Err(SimError::InsufficientSamples(format!(
            "need m < N for single-class replacement, got m={m}, N={n}"
        )));
    }
    assert!(interval >= 1, "context interval must be at least 1");
    let reference = dataset.manifest.reference_config_id();
    let table = dataset
        .table(reference, split)
        .ok_or_else(|| SimError::InsufficientSamples(format!("missing split `{split}`")))?;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..table.rows() {
        per_class[table.class_indices[i]].push(i);
    }
    for (class, rows) in per_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(SimError::InsufficientSamples(format!(
                "class {class} has no samples in split `{split}`"
            )));
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    let mut current: Vec<usize> = all[..m].to_vec();
    current.sort_unstable();
    let mut contexts = vec![current.clone()];
    let mut entering: Vec<Option<usize>> = vec![None];
    for _ in 0..n_changes {
        let drop_pos = rng.gen_range(0..m);
        let outside: Vec<usize> = (0..n).filter(|c| !current.contains(c)).collect();
        let add = outside[rng.gen_range(0..outside.len())];
        current.remove(drop_pos);
        current.push(add);
        current.sort_unstable();
        contexts.push(current.clone());
        entering.push(Some(add));
    }

    let mut frames = Vec::with_capacity(contexts.len() * interval);
    let mut boundaries = Vec::with_capacity(contexts.len());
    for (combo, enter) in contexts.iter().zip(&entering) {
        boundaries.push(frames.len());
        for i in 0..interval {
            let class = match (i, enter) {
                (0, Some(c)) => *c,
                _ => combo[rng.gen_range(0..combo.len())],
            };
            let row = per_class[class][rng.gen_range(0..per_class[class].len())];
            frames.push(Frame {
                sample_id: table.sample_ids[row].clone(),
                class_index: class,
            });
        }
    }
    Ok(FrameTrace {
        split: split.to_string(),
        frames,
        contexts,
        boundaries,
    })
}

/// The all-class model plus its cost row on the simulated device.
#[derive(Debug, Clone)]
pub struct AllClassModel {
    pub classifier: Arc<MicroClassifier>,
    pub config_id: String,
    pub flops_m: f64,
    pub device_latency_ms: f64,
}

impl AllClassModel {
    pub fn from_config(
        classifier: Arc<MicroClassifier>,
        manifest: &Manifest,
        device: &str,
    ) -> Result<Self, SimError> {
        let config_id = classifier.config_id.clone();
        let cfg = manifest
            .config(&config_id)
            .ok_or_else(|| SimError::UnknownConfig(config_id.clone()))?;
        let ms = *cfg
            .device_latency_ms
            .get(device)
            .ok_or_else(|| SimError::UnknownDevice {
                device: device.to_string(),
                config: config_id.clone(),
            })?;
        Ok(AllClassModel {
            classifier,
            config_id,
            flops_m: cfg.flops_m,
            device_latency_ms: ms,
        })
    }
}

/// Where head pairs come from on a context switch.
pub enum Provider {
    /// Train on demand in the cloud and charge the download on cache miss.
    Cloud,
    /// Switch only among pre-installed head pairs.
    Local { installed: Vec<InstalledEntry> },
}

/// Inference backend: real trained heads, or an oracle pipeline (perfect
/// detector, labels and switches) for conservation checks and trace
/// collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Trained,
    Ideal,
}

/// Everything the simulator executes against.
pub struct SimSystem<'a> {
    pub dataset: &'a EmbeddingDataset,
    pub sims: &'a SimilarityMatrix,
    pub predictors: &'a BTreeMap<usize, ConfigPredictor>,
    pub all_class: AllClassModel,
    pub provider: Provider,
    pub backend: Backend,
    pub hyper: HeadHyperparams,
    /// Config for the initial context; by default the predictor decides.
    pub initial_config: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub device_inference_ns: u64,
    pub uplink_ns: u64,
    pub all_class_ns: u64,
    pub head_download_ns: u64,
}

impl LatencyBreakdown {
    pub fn total_ns(&self) -> u64 {
        self.device_inference_ns + self.uplink_ns + self.all_class_ns + self.head_download_ns
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub sample_id: String,
    pub true_class: usize,
    pub in_context: bool,
    pub triggered: bool,
    pub switched: bool,
    pub emitted: usize,
    pub correct: bool,
    pub latency_ns: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub mode: Mode,
    pub device: String,
    pub context_interval: usize,
    pub frames: usize,
    pub accuracy: f64,
    pub avg_latency_ms: f64,
    pub total_latency_ns: u64,
    pub breakdown: LatencyBreakdown,
    pub trigger_count: usize,
    pub switch_count: usize,
    /// Local mode: switches that found no installed head covering the new
    /// class (the device stays on its current context).
    pub uncovered_switches: usize,
    pub fp_count: usize,
    pub fn_count: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub avg_device_mflops: f64,
    pub all_class_mflops: f64,
    /// Per-frame device latency of running the all-class model everywhere.
    pub all_class_latency_ms: f64,
    pub speedup_vs_allclass: f64,
    /// Every context installed, in order (the initial one first).
    pub switch_log: Vec<ContextKey>,
    pub per_frame: Option<Vec<FrameRecord>>,
}

impl SimulationReport {
    pub fn csv_header() -> &'static str {
        "mode,device,interval,frames,accuracy,avg_latency_ms,speedup,triggers,switches,fp,fn"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            match self.mode {
                Mode::Cloud => "cloud",
                Mode::Local => "local",
            },
            self.device,
            self.context_interval,
            self.frames,
            self.accuracy,
            self.avg_latency_ms,
            self.speedup_vs_allclass,
            self.trigger_count,
            self.switch_count,
            self.fp_count,
            self.fn_count
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SimError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn write_frames_csv(&self, path: &Path) -> Result<(), SimError> {
        let Some(records) = &self.per_frame else {
            return Err(SimError::LogDisabled);
        };
        let mut out =
            String::from("index,sample_id,true_class,in_context,triggered,switched,emitted,correct,latency_ns\n");
        for r in records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.index,
                r.sample_id,
                r.true_class,
                r.in_context as u8,
                r.triggered as u8,
                r.switched as u8,
                r.emitted,
                r.correct as u8,
                r.latency_ns
            );
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Online detector rates from the per-frame log: FP over in-context frames,
/// FN over out-of-context frames (0 when a denominator is empty).
pub fn measure_fpfn_online(report: &SimulationReport) -> Result<(f64, f64), SimError> {
    let records = report.per_frame.as_ref().ok_or(SimError::LogDisabled)?;
    let mut in_total = 0usize;
    let mut fp = 0usize;
    let mut out_total = 0usize;
    let mut fn_ = 0usize;
    for r in records {
        if r.in_context {
            in_total += 1;
            if r.triggered {
                fp += 1;
            }
        } else {
            out_total += 1;
            if !r.triggered {
                fn_ += 1;
            }
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok((rate(fp, in_total), rate(fn_, out_total)))
}

struct CostTable {
    latency_ns: BTreeMap<String, u64>,
    flops_m: BTreeMap<String, f64>,
    dims: BTreeMap<String, usize>,
    param_bytes: BTreeMap<String, u64>,
}

impl CostTable {
    fn build(manifest: &Manifest, device: &str) -> Result<Self, SimError> {
        let mut latency_ns = BTreeMap::new();
        let mut flops_m = BTreeMap::new();
        let mut dims = BTreeMap::new();
        let mut param_bytes = BTreeMap::new();
        for cfg in &manifest.configs {
            let ms = *cfg
                .device_latency_ms
                .get(device)
                .ok_or_else(|| SimError::UnknownDevice {
                    device: device.to_string(),
                    config: cfg.id.clone(),
                })?;
            latency_ns.insert(cfg.id.clone(), ms_to_ns(ms));
            flops_m.insert(cfg.id.clone(), cfg.flops_m);
            dims.insert(cfg.id.clone(), cfg.embedding_dim);
            param_bytes.insert(cfg.id.clone(), cfg.param_bytes_per_weight);
        }
        Ok(CostTable {
            latency_ns,
            flops_m,
            dims,
            param_bytes,
        })
    }

    fn head_pair_bytes(&self, config_id: &str, hidden: usize, m: usize) -> u64 {
        let d = self.dims[config_id];
        head_pair_param_count(d, hidden, m) as u64 * self.param_bytes[config_id]
    }
}

/// Deterministic seed for the head pair of one (config, combo) pair. Shared
/// by the oracle search and the cloud provider so the same context always
/// trains to identical heads.
pub fn head_seed(base: u64, config_id: &str, combo: &[usize]) -> u64 {
    derive_seed(base, &format!("{config_id}/{combo:?}"))
}

/// Runs the trace through the pipeline. Deterministic: identical inputs
/// produce byte-identical reports.
pub fn run(
    sim: &SimConfig,
    trace: &FrameTrace,
    system: &mut SimSystem,
) -> Result<SimulationReport, SimError> {
    let manifest = &system.dataset.manifest;
    let costs = CostTable::build(manifest, &sim.device)?;
    let hidden = system.hyper.hidden_dim;

    // Cloud-side memo of trained heads: retraining the same context after a
    // cache eviction would reproduce identical parameters (fixed derived
    // seed), so memoizing changes nothing observable.
    let mut cloud_store: BTreeMap<ContextKey, Arc<MicroClassifier>> = BTreeMap::new();
    let dataset = system.dataset;
    let base_seed = system.hyper.seed;
    let hyper = system.hyper;
    let backend = system.backend;
    let mut make_heads = |combo: &[usize], config_id: &str| -> Result<Arc<MicroClassifier>, SwitchError> {
        let key: ContextKey = (combo.to_vec(), config_id.to_string());
        if let Some(heads) = cloud_store.get(&key) {
            return Ok(Arc::clone(heads));
        }
        let heads = match backend {
            Backend::Ideal => Arc::new(MicroClassifier::zeroed(
                config_id,
                combo,
                dataset
                    .manifest
                    .config(config_id)
                    .map(|c| c.embedding_dim)
                    .unwrap_or(1),
                hidden,
                0.5,
            )),
            Backend::Trained => {
                let mut h = hyper;
                h.seed = head_seed(base_seed, config_id, combo);
                Arc::new(train_heads(dataset, config_id, combo, &h)?)
            }
        };
        cloud_store.insert(key, Arc::clone(&heads));
        Ok(heads)
    };

    // Initial context: heads are pre-deployed at zero charge.
    let initial_combo = trace.contexts[0].clone();
    let initial_config = match &system.initial_config {
        Some(id) => id.clone(),
        None => {
            let m = initial_combo.len();
            let predictor = system
                .predictors
                .get(&m)
                .ok_or(PredictorError::MissingPredictor(m))?;
            let rep = context_representation(system.sims, &initial_combo)?;
            predictor.predict_config(rep.mean_sim, rep.std_sim)?.to_string()
        }
    };
    if !costs.latency_ns.contains_key(&initial_config) {
        return Err(SimError::UnknownConfig(initial_config));
    }
    let initial_heads = match &system.provider {
        Provider::Cloud => make_heads(&initial_combo, &initial_config)?,
        Provider::Local { installed } => {
            let exact = installed
                .iter()
                .filter(|e| e.combo == initial_combo)
                .min_by(|a, b| a.flops_m.total_cmp(&b.flops_m));
            match exact {
                Some(e) => Arc::clone(&e.heads),
                None => {
                    let new_class = initial_combo[0];
                    let entry = local_fallback(&initial_combo, new_class, installed)?;
                    Arc::clone(&entry.heads)
                }
            }
        }
    };
    // In local mode the initial context may have been served by a fallback
    // entry; align the state with what is actually deployed.
    let (state_combo, state_config) = (
        initial_heads.combo.clone(),
        initial_heads.config_id.clone(),
    );
    let mut state = SwitchState::new(
        state_combo,
        state_config,
        initial_heads,
        sim.m_set.iter().copied().collect(),
        sim.cache_capacity,
    );
    for &c in trace.contexts[0].iter().rev() {
        state.note_class(c);
    }
    let mut switch_log: Vec<ContextKey> = vec![(state.combo.clone(), state.config_id.clone())];

    let uplink_per_trigger = transmission_ns(sim.frame_bytes, sim.data_rate_mbps);
    let cloud_compute_ns = ms_to_ns(sim.cloud_ms);
    let allclass_device_ns = ms_to_ns(system.all_class.device_latency_ms);

    let mut breakdown = LatencyBreakdown::default();
    let mut per_frame_total: u64 = 0;
    let mut records: Vec<FrameRecord> = Vec::new();
    let mut correct_count = 0usize;
    let mut trigger_count = 0usize;
    let mut switch_count = 0usize;
    let mut uncovered_switches = 0usize;
    let mut fp_count = 0usize;
    let mut fn_count = 0usize;
    let mut device_mflops_total = 0.0f64;
    let mut ctx_idx = 0usize;

    for (index, frame) in trace.frames.iter().enumerate() {
        while ctx_idx + 1 < trace.boundaries.len() && index >= trace.boundaries[ctx_idx + 1] {
            ctx_idx += 1;
        }
        let frame_err = |e: SimError| SimError::Frame {
            index,
            source: Box::new(e),
        };

        let mut frame_ns: u64 = 0;
        let in_context = state.combo.binary_search(&frame.class_index).is_ok();

        // Device inference with the current micro-classifier.
        let device_ns = costs.latency_ns[&state.config_id];
        frame_ns += device_ns;
        breakdown.device_inference_ns += device_ns;
        device_mflops_total += costs.flops_m[&state.config_id];

        let outcome = match system.backend {
            Backend::Trained => {
                let table = dataset
                    .table(&state.config_id, &trace.split)
                    .ok_or_else(|| frame_err(SimError::UnknownConfig(state.config_id.clone())))?;
                let row = table.row_of_sample(&frame.sample_id).ok_or_else(|| {
                    frame_err(SimError::InsufficientSamples(format!(
                        "sample `{}` missing in {}/{}",
                        frame.sample_id, state.config_id, trace.split
                    )))
                })?;
                predict(&state.heads, table.row(row)).map_err(|e| frame_err(e.into()))?
            }
            Backend::Ideal => PredictionOutcome {
                class_probs: vec![1.0],
                predicted_class: if in_context {
                    frame.class_index
                } else {
                    state.combo[0]
                },
                change_score: if in_context { 0.0 } else { 1.0 },
            },
        };

        let triggered = detect_change(&outcome, sim.theta);
        if triggered && in_context {
            fp_count += 1;
        }
        if !triggered && !in_context {
            fn_count += 1;
        }

        let mut switched = false;
        let emitted = if !triggered {
            outcome.predicted_class
        } else {
            trigger_count += 1;
            match sim.mode {
                Mode::Cloud => {
                    frame_ns += uplink_per_trigger;
                    breakdown.uplink_ns += uplink_per_trigger;
                    frame_ns += cloud_compute_ns;
                    breakdown.all_class_ns += cloud_compute_ns;
                }
                Mode::Local => {
                    frame_ns += allclass_device_ns;
                    breakdown.all_class_ns += allclass_device_ns;
                    device_mflops_total += system.all_class.flops_m;
                }
            }
            let identified = match system.backend {
                Backend::Trained => {
                    let table = dataset
                        .table(&system.all_class.config_id, &trace.split)
                        .ok_or_else(|| {
                            frame_err(SimError::UnknownConfig(system.all_class.config_id.clone()))
                        })?;
                    let row = table.row_of_sample(&frame.sample_id).ok_or_else(|| {
                        frame_err(SimError::InsufficientSamples(format!(
                            "sample `{}` missing in all-class table",
                            frame.sample_id
                        )))
                    })?;
                    identify_class(&system.all_class.classifier, table.row(row))
                        .map_err(|e| frame_err(e.into()))?
                }
                Backend::Ideal => frame.class_index,
            };

            if !state.combo.contains(&identified) {
                match (&system.provider, system.backend) {
                    (Provider::Cloud, Backend::Trained) => {
                        let out = hybrid_switch(
                            &mut state,
                            identified,
                            system.predictors,
                            system.sims,
                            manifest,
                            &mut |combo, config| make_heads(combo, config),
                        )
                        .map_err(|e| frame_err(e.into()))?;
                        switch_count += 1;
                        switched = true;
                        if !out.cache_hit {
                            let bytes =
                                costs.head_pair_bytes(&out.plan.config_id, hidden, out.plan.m);
                            let dl = transmission_ns(bytes, sim.data_rate_mbps);
                            frame_ns += dl;
                            breakdown.head_download_ns += dl;
                        }
                        switch_log.push((state.combo.clone(), state.config_id.clone()));
                    }
                    (Provider::Cloud, Backend::Ideal) => {
                        // Oracle switch: install the declared context.
                        let combo = trace.contexts[ctx_idx].clone();
                        let m = combo.len();
                        let predictor = system
                            .predictors
                            .get(&m)
                            .ok_or(PredictorError::MissingPredictor(m))
                            .map_err(|e| frame_err(e.into()))?;
                        let rep = context_representation(system.sims, &combo)
                            .map_err(|e| frame_err(e.into()))?;
                        let config = predictor
                            .predict_config(rep.mean_sim, rep.std_sim)
                            .map_err(|e| frame_err(e.into()))?
                            .to_string();
                        let key: ContextKey = (combo.clone(), config.clone());
                        let (heads, cache_hit, _) = state
                            .cache
                            .get_or_admit(&key, || make_heads(&combo, &config))
                            .map_err(|e| frame_err(e.into()))?;
                        if !cache_hit {
                            let bytes = costs.head_pair_bytes(&config, hidden, m);
                            let dl = transmission_ns(bytes, sim.data_rate_mbps);
                            frame_ns += dl;
                            breakdown.head_download_ns += dl;
                        }
                        state.combo = combo;
                        state.config_id = config;
                        state.heads = heads;
                        state.note_class(identified);
                        switch_count += 1;
                        switched = true;
                        switch_log.push((state.combo.clone(), state.config_id.clone()));
                    }
                    (Provider::Local { installed }, backend) => {
                        let chosen = match backend {
                            Backend::Ideal => {
                                let desired = &trace.contexts[ctx_idx];
                                installed
                                    .iter()
                                    .filter(|e| e.combo == *desired)
                                    .min_by(|a, b| a.flops_m.total_cmp(&b.flops_m))
                                    .map(Ok)
                                    .unwrap_or_else(|| {
                                        local_fallback(desired, identified, installed)
                                    })
                            }
                            Backend::Trained => {
                                local_switch(&state, identified, system.sims, installed)
                            }
                        };
                        match chosen {
                            Ok(entry) => {
                                state.combo = entry.combo.clone();
                                state.config_id = entry.config_id.clone();
                                state.heads = Arc::clone(&entry.heads);
                                state.note_class(identified);
                                switch_count += 1;
                                switched = true;
                                switch_log
                                    .push((state.combo.clone(), state.config_id.clone()));
                            }
                            Err(SwitchError::NewClassUncovered(_)) => {
                                // No installed head covers the class; stay.
                                uncovered_switches += 1;
                            }
                            Err(e) => return Err(frame_err(e.into())),
                        }
                    }
                }
            }
            identified
        };

        state.note_class(emitted);
        let correct = emitted == frame.class_index;
        if correct {
            correct_count += 1;
        }
        per_frame_total += frame_ns;
        if sim.per_frame_log {
            records.push(FrameRecord {
                index,
                sample_id: frame.sample_id.clone(),
                true_class: frame.class_index,
                in_context,
                triggered,
                switched,
                emitted,
                correct,
                latency_ns: frame_ns,
            });
        }
    }

    let frames = trace.frames.len();
    debug_assert_eq!(breakdown.total_ns(), per_frame_total);
    let total_ns = per_frame_total;
    let all_class_total_ns = allclass_device_ns * frames as u64;
    Ok(SimulationReport {
        mode: sim.mode,
        device: sim.device.clone(),
        context_interval: sim.context_interval,
        frames,
        accuracy: correct_count as f64 / frames as f64,
        avg_latency_ms: total_ns as f64 / frames as f64 / 1e6,
        total_latency_ns: total_ns,
        breakdown,
        trigger_count,
        switch_count,
        uncovered_switches,
        fp_count,
        fn_count,
        cache_hits: state.cache.hits(),
        cache_misses: state.cache.misses(),
        avg_device_mflops: device_mflops_total / frames as f64,
        all_class_mflops: system.all_class.flops_m,
        all_class_latency_ms: system.all_class.device_latency_ms,
        speedup_vs_allclass: all_class_total_ns as f64 / total_ns as f64,
        switch_log,
        per_frame: if sim.per_frame_log { Some(records) } else { None },
    })
}
