//! Micro-classifier heads: a classification head and a context-change
//! regression head over frozen embeddings.
//!
//! Each head is a two-layer network (input -> hidden ReLU -> output); the
//! heads share the embedding input but not the hidden layer. The
//! classification head is trained with softmax cross-entropy on the
//! combination's samples; the regression head with binary cross-entropy,
//! target 0 in-context and 1 for sampled out-of-context negatives.
//! Optimization is mini-batch SGD with momentum, driven by a seeded ChaCha8
//! stream, so training is deterministic bit-for-bit per seed.
//!
//! Parameters are stored flat in a fixed layout (classification w1, b1, w2,
//! b2, then the same for the change head), which the checkpoint format and
//! the finite-difference gradient check rely on.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EmbeddingDataset, EmbeddingMatrix, TRAIN_SPLIT, VAL_SPLIT, TEST_SPLIT};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("unknown config or split: {0}")]
    UnknownTable(String),
    #[error("class {0} has no train samples")]
    EmptyClass(usize),
    #[error("no out-of-context samples available for regression negatives")]
    NoNegativesAvailable,
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("split `{0}` has no usable samples")]
    EmptySplit(String),
    #[error("class probabilities sum to {0}, not 1")]
    NotADistribution(f64),
    #[error("bad combination: {0}")]
    BadCombo(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Training hyperparameters. Defaults: hidden 64, 50 epochs, batch 32,
/// learning rate 0.01, momentum 0.9, one negative per in-context sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadHyperparams {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Out-of-context negatives per in-context sample for the change head.
    pub negative_ratio: f64,
    pub seed: u64,
}

impl Default for HeadHyperparams {
    fn default() -> Self {
        HeadHyperparams {
            hidden_dim: 64,
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            negative_ratio: 1.0,
            seed: 42,
        }
    }
}

/// Flat parameter layout: class w1 (H x d), class b1 (H), class w2 (m x H),
/// class b2 (m), change w1 (H x d), change b1 (H), change w2 (1 x H),
/// change b2 (1).
#[derive(Debug, Clone, Copy)]
struct Layout {
    d: usize,
    h: usize,
    m: usize,
}

impl Layout {
    fn class_w1(&self) -> usize {
        0
    }
    fn class_b1(&self) -> usize {
        self.h * self.d
    }
    fn class_w2(&self) -> usize {
        self.class_b1() + self.h
    }
    fn class_b2(&self) -> usize {
        self.class_w2() + self.m * self.h
    }
    fn change_w1(&self) -> usize {
        self.class_b2() + self.m
    }
    fn change_b1(&self) -> usize {
        self.change_w1() + self.h * self.d
    }
    fn change_w2(&self) -> usize {
        self.change_b1() + self.h
    }
    fn change_b2(&self) -> usize {
        self.change_w2() + self.h
    }
    fn total(&self) -> usize {
        self.change_b2() + 1
    }
}

/// Number of parameters of a head pair: two independent two-layer heads
/// sharing only the embedding input.
pub fn head_pair_param_count(input_dim: usize, hidden_dim: usize, m: usize) -> usize {
    2 * (input_dim * hidden_dim + hidden_dim) + (hidden_dim * m + m) + (hidden_dim + 1)
}

/// Forward-pass output of a micro-classifier.
#[derive(Debug, Clone)]
pub struct PredictionOutcome {
    /// Softmax probabilities in combo order; sums to 1.
    pub class_probs: Vec<f64>,
    /// Global class index: `combo[argmax(class_probs)]`, lowest position on
    /// exact ties.
    pub predicted_class: usize,
    /// Change-regression output after the sigmoid, in [0, 1].
    pub change_score: f64,
}

/// A trained (or explicitly constructed) micro-classifier head pair.
#[derive(Debug, Clone)]
pub struct MicroClassifier {
    pub config_id: String,
    /// Sorted global class indices the classifier is trained on.
    pub combo: Vec<usize>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Change-detection threshold.
    pub theta: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub seed: u64,
    params: Vec<f64>,
}

/// One training (or gradient-check) row: an embedding, an optional
/// combo-local class target, and the change-regression target.
#[derive(Debug, Clone)]
pub struct TrainRow {
    pub x: Vec<f64>,
    pub class_target: Option<usize>,
    pub change_target: f64,
}

impl MicroClassifier {
    fn layout(&self) -> Layout {
        Layout {
            d: self.input_dim,
            h: self.hidden_dim,
            m: self.combo.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.params.len(), "parameter count mismatch");
        self.params.copy_from_slice(p);
    }

    /// All-zero head pair: uniform class probabilities, change score 0.5.
    pub fn zeroed(
        config_id: &str,
        combo: &[usize],
        input_dim: usize,
        hidden_dim: usize,
        theta: f64,
    ) -> Self {
        let mut combo = combo.to_vec();
        combo.sort_unstable();
        let n = head_pair_param_count(input_dim, hidden_dim, combo.len());
        MicroClassifier {
            config_id: config_id.to_string(),
            combo,
            input_dim,
            hidden_dim,
            theta,
            train_accuracy: 0.0,
            val_accuracy: 0.0,
            seed: 0,
            params: vec![0.0; n],
        }
    }

    /// Xavier-uniform weights, zero biases, from the seeded stream.
    fn initialized(
        config_id: &str,
        combo: Vec<usize>,
        input_dim: usize,
        hyper: &HeadHyperparams,
        theta: f64,
    ) -> Self {
        let mut c = MicroClassifier::zeroed(config_id, &combo, input_dim, hyper.hidden_dim, theta);
        c.seed = hyper.seed;
        let mut rng = rng_from_seed(hyper.seed);
        let l = c.layout();
        let init_uniform = |lo: usize, count: usize, fan_in: usize, fan_out: usize, p: &mut Vec<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p[lo..lo + count] {
                *v = rng.gen_range(-a..a);
            }
        };
        let mut p = std::mem::take(&mut c.params);
        init_uniform(l.class_w1(), l.h * l.d, l.d, l.h, &mut p, &mut rng);
        init_uniform(l.class_w2(), l.m * l.h, l.h, l.m, &mut p, &mut rng);
        init_uniform(l.change_w1(), l.h * l.d, l.d, l.h, &mut p, &mut rng);
        init_uniform(l.change_w2(), l.h, l.h, 1, &mut p, &mut rng);
        c.params = p;
        c
    }

    fn hidden(&self, x: &[f64], w1_off: usize, b1_off: usize, out: &mut [f64]) {
        let l = self.layout();
        for j in 0..l.h {
            let mut a = self.params[b1_off + j];
            let row = &self.params[w1_off + j * l.d..w1_off + (j + 1) * l.d];
            for (w, xi) in row.iter().zip(x) {
                a += w * xi;
            }
            out[j] = if a > 0.0 { a } else { 0.0 };
        }
    }

    fn class_logits(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let l = self.layout();
        self.hidden(x, l.class_w1(), l.class_b1(), hidden);
        for k in 0..l.m {
            let mut z = self.params[l.class_b2() + k];
            let row = &self.params[l.class_w2() + k * l.h..l.class_w2() + (k + 1) * l.h];
            for (w, h) in row.iter().zip(hidden.iter()) {
                z += w * h;
            }
            logits[k] = z;
        }
    }

    fn change_logit(&self, x: &[f64], hidden: &mut [f64]) -> f64 {
        let l = self.layout();
        self.hidden(x, l.change_w1(), l.change_b1(), hidden);
        let mut z = self.params[l.change_b2()];
        let row = &self.params[l.change_w2()..l.change_w2() + l.h];
        for (w, h) in row.iter().zip(hidden.iter()) {
            z += w * h;
        }
        z
    }

    /// Mean loss over the rows: softmax cross-entropy over rows with a class
    /// target plus binary cross-entropy of the change head over all rows.
    pub fn loss(&self, rows: &[TrainRow]) -> f64 {
        let l = self.layout();
        let mut hidden = vec![0.0; l.h];
        let mut logits = vec![0.0; l.m];
        let mut ce = 0.0;
        let mut labeled = 0usize;
        let mut bce = 0.0;
        for row in rows {
            if let Some(t) = row.class_target {
                self.class_logits(&row.x, &mut hidden, &mut logits);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                ce += lse - logits[t];
                labeled += 1;
            }
            let z = self.change_logit(&row.x, &mut hidden);
            // Numerically stable BCE on the logit.
            bce += z.max(0.0) - z * row.change_target + (-z.abs()).exp().ln_1p();
        }
        let mut total = bce / rows.len() as f64;
        if labeled > 0 {
            total += ce / labeled as f64;
        }
        total
    }

    /// Analytic gradient of [`Self::loss`] in the flat parameter layout.
    pub fn grad(&self, rows: &[TrainRow]) -> Vec<f64> {
        let l = self.layout();
        let mut grad = vec![0.0; l.total()];
        let mut hidden = vec![0.0; l.h];
        let mut logits = vec![0.0; l.m];
        let labeled = rows.iter().filter(|r| r.class_target.is_some()).count();
        let n = rows.len() as f64;
        for row in rows {
            if let Some(t) = row.class_target {
                self.class_logits(&row.x, &mut hidden, &mut logits);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = probs.iter().sum();
                for p in &mut probs {
                    *p /= sum;
                }
                let scale = 1.0 / labeled as f64;
                // dL/dz_k = (p_k - [k == t]) / labeled
                for k in 0..l.m {
                    let dz = (probs[k] - if k == t { 1.0 } else { 0.0 }) * scale;
                    grad[l.class_b2() + k] += dz;
                    for j in 0..l.h {
                        grad[l.class_w2() + k * l.h + j] += dz * hidden[j];
                    }
                }
                for j in 0..l.h {
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let mut dh = 0.0;
                    for k in 0..l.m {
                        let dz = (probs[k] - if k == t { 1.0 } else { 0.0 }) * scale;
                        dh += dz * self.params[l.class_w2() + k * l.h + j];
                    }
                    grad[l.class_b1() + j] += dh;
                    for (i, xi) in row.x.iter().enumerate() {
                        grad[l.class_w1() + j * l.d + i] += dh * xi;
                    }
                }
            }
            let z = self.change_logit(&row.x, &mut hidden);
            let sig = 1.0 / (1.0 + (-z).exp());
            let dz = (sig - row.change_target) / n;
            grad[l.change_b2()] += dz;
            for j in 0..l.h {
                grad[l.change_w2() + j] += dz * hidden[j];
                if hidden[j] > 0.0 {
                    let dh = dz * self.params[l.change_w2() + j];
                    grad[l.change_b1() + j] += dh;
                    for (i, xi) in row.x.iter().enumerate() {
                        grad[l.change_w1() + j * l.d + i] += dh * xi;
                    }
                }
            }
        }
        grad
    }
}

/// Forward pass: max-stabilized softmax over the classification head and a
/// sigmoid over the change head.
pub fn predict(
    classifier: &MicroClassifier,
    embedding: &[f64],
) -> Result<PredictionOutcome, HeadsError> {
    if embedding.len() != classifier.input_dim {
        return Err(HeadsError::DimensionMismatch {
            expected: classifier.input_dim,
            found: embedding.len(),
        });
    }
    let l = classifier.layout();
    let mut hidden = vec![0.0; l.h];
    let mut logits = vec![0.0; l.m];
    classifier.class_logits(embedding, &mut hidden, &mut logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    let mut best = 0usize;
    for (k, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = k;
        }
    }
    let z = classifier.change_logit(embedding, &mut hidden);
    Ok(PredictionOutcome {
        predicted_class: classifier.combo[best],
        class_probs: probs,
        change_score: 1.0 / (1.0 + (-z).exp()),
    })
}

fn table<'a>(
    dataset: &'a EmbeddingDataset,
    config_id: &str,
    split: &str,
) -> Result<&'a EmbeddingMatrix, HeadsError> {
    dataset
        .table(config_id, split)
        .ok_or_else(|| HeadsError::UnknownTable(format!("{config_id}/{split}")))
}

fn training_rows(
    dataset: &EmbeddingDataset,
    config_id: &str,
    combo: &[usize],
    hyper: &HeadHyperparams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<TrainRow>, HeadsError> {
    let train = table(dataset, config_id, TRAIN_SPLIT)?;
    let mut rows = Vec::new();
    let mut per_class = vec![0usize; combo.len()];
    let mut negatives_pool: Vec<usize> = Vec::new();
    for i in 0..train.rows() {
        let class = train.class_indices[i];
        match combo.binary_search(&class) {
            Ok(pos) => {
                per_class[pos] += 1;
                rows.push(TrainRow {
                    x: train.row(i).to_vec(),
                    class_target: Some(pos),
                    change_target: 0.0,
                });
            }
            Err(_) => negatives_pool.push(i),
        }
    }
    for (pos, count) in per_class.iter().enumerate() {
        if *count == 0 {
            return Err(HeadsError::EmptyClass(combo[pos]));
        }
    }
    if hyper.negative_ratio > 0.0 {
        if negatives_pool.is_empty() {
            return Err(HeadsError::NoNegativesAvailable);
        }
        let n_neg = (hyper.negative_ratio * rows.len() as f64).round() as usize;
        for _ in 0..n_neg {
            let i = negatives_pool[rng.gen_range(0..negatives_pool.len())];
            rows.push(TrainRow {
                x: train.row(i).to_vec(),
                class_target: None,
                change_target: 1.0,
            });
        }
    }
    Ok(rows)
}

fn fit(
    classifier: &mut MicroClassifier,
    rows: &[TrainRow],
    hyper: &HeadHyperparams,
    rng: &mut rand_chacha::ChaCha8Rng,
    record_loss: bool,
) -> Vec<f64> {
    let mut velocity = vec![0.0; classifier.param_count()];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut batch: Vec<TrainRow> = Vec::with_capacity(hyper.batch_size);
    let mut epoch_losses = Vec::new();
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i].clone()));
            let grad = classifier.grad(&batch);
            for ((v, g), p) in velocity
                .iter_mut()
                .zip(&grad)
                .zip(classifier.params.iter_mut())
            {
                *v = hyper.momentum * *v - hyper.learning_rate * g;
                *p += *v;
            }
        }
        if record_loss {
            epoch_losses.push(classifier.loss(rows));
        }
    }
    epoch_losses
}

/// Trains a head pair on the combination's train-split embeddings.
/// Deterministic per seed. `val_accuracy` is measured on the `val` split
/// when present, otherwise on `test`.
pub fn train_heads(
    dataset: &EmbeddingDataset,
    config_id: &str,
    combo: &[usize],
    hyper: &HeadHyperparams,
) -> Result<MicroClassifier, HeadsError> {
    Ok(train_heads_traced(dataset, config_id, combo, hyper, false)?.0)
}

/// As [`train_heads`], additionally returning the mean full-set training
/// loss after each epoch when `record_loss` is set.
pub fn train_heads_traced(
    dataset: &EmbeddingDataset,
    config_id: &str,
    combo: &[usize],
    hyper: &HeadHyperparams,
    record_loss: bool,
) -> Result<(MicroClassifier, Vec<f64>), HeadsError> {
    let mut combo = combo.to_vec();
    combo.sort_unstable();
    combo.dedup();
    if combo.len() < 2 {
        return Err(HeadsError::BadCombo(
            "combination needs at least 2 distinct classes".into(),
        ));
    }
    let n = dataset.manifest.num_classes();
    if let Some(&bad) = combo.iter().find(|&&c| c >= n) {
        return Err(HeadsError::BadCombo(format!(
            "class index {bad} out of range (N={n})"
        )));
    }
    let dim = dataset
        .manifest
        .config(config_id)
        .ok_or_else(|| HeadsError::UnknownTable(config_id.to_string()))?
        .embedding_dim;

    let mut rng = rng_from_seed(hyper.seed);
    let mut classifier = MicroClassifier::initialized(config_id, combo, dim, hyper, 0.5);
    let rows = training_rows(dataset, config_id, &classifier.combo, hyper, &mut rng)?;
    let losses = fit(&mut classifier, &rows, hyper, &mut rng, record_loss);

    classifier.train_accuracy = evaluate_accuracy(&classifier, dataset, TRAIN_SPLIT)?;
    let val_split = if dataset.table(config_id, VAL_SPLIT).is_some() {
        VAL_SPLIT
    } else {
        TEST_SPLIT
    };
    classifier.val_accuracy = evaluate_accuracy(&classifier, dataset, val_split)?;
    Ok((classifier, losses))
}

/// Fraction of the split's in-combination samples classified correctly.
pub fn evaluate_accuracy(
    classifier: &MicroClassifier,
    dataset: &EmbeddingDataset,
    split: &str,
) -> Result<f64, HeadsError> {
    let t = table(dataset, &classifier.config_id, split)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for i in 0..t.rows() {
        let class = t.class_indices[i];
        if classifier.combo.binary_search(&class).is_ok() {
            total += 1;
            let out = predict(classifier, t.row(i))?;
            if out.predicted_class == class {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(HeadsError::EmptySplit(split.to_string()));
    }
    Ok(correct as f64 / total as f64)
}

/// Detector error rates on a split: FP is the fraction of in-combination
/// samples with change score strictly above `theta`, FN the fraction of
/// out-of-combination samples at or below it.
pub fn evaluate_fpfn(
    classifier: &MicroClassifier,
    dataset: &EmbeddingDataset,
    split: &str,
    theta: f64,
) -> Result<(f64, f64), HeadsError> {
    let t = table(dataset, &classifier.config_id, split)?;
    let mut in_total = 0usize;
    let mut fp = 0usize;
    let mut out_total = 0usize;
    let mut fnr = 0usize;
    for i in 0..t.rows() {
        let out = predict(classifier, t.row(i))?;
        if classifier.combo.binary_search(&t.class_indices[i]).is_ok() {
            in_total += 1;
            if out.change_score > theta {
                fp += 1;
            }
        } else {
            out_total += 1;
            if out.change_score <= theta {
                fnr += 1;
            }
        }
    }
    if in_total == 0 || out_total == 0 {
        return Err(HeadsError::EmptySplit(split.to_string()));
    }
    Ok((fp as f64 / in_total as f64, fnr as f64 / out_total as f64))
}

/// Max-softmax baseline: a change is flagged when the winning probability
/// falls below the threshold.
pub fn maxprob_change_detector(class_probs: &[f64], threshold: f64) -> Result<bool, HeadsError> {
    let sum: f64 = class_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(HeadsError::NotADistribution(sum));
    }
    let max = class_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max < threshold)
}

/// Compares the analytic gradient against central finite differences (step
/// 1e-5) over every parameter and returns the largest relative error.
/// Parameters where both gradients are below 1e-8 in magnitude are compared
/// absolutely at that tolerance instead (they count as matching).
pub fn gradient_check(classifier: &MicroClassifier, batch: &[TrainRow]) -> f64 {
    const STEP: f64 = 1e-5;
    const ABS_TOL: f64 = 1e-8;
    let analytic = classifier.grad(batch);
    let mut probe = classifier.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.param_count() {
        let orig = probe.params[i];
        probe.params[i] = orig + STEP;
        let up = probe.loss(batch);
        probe.params[i] = orig - STEP;
        let down = probe.loss(batch);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs());
        if denom <= ABS_TOL {
            continue;
        }
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config_id: String,
    combo: Vec<usize>,
    input_dim: usize,
    hidden_dim: usize,
    theta: f64,
    seed: u64,
    train_accuracy: f64,
    val_accuracy: f64,
    param_count: usize,
}

/// Path of a checkpoint under `root`: `heads/<config>/<c1-c2-...>.bin`.
pub fn checkpoint_path(root: &Path, config_id: &str, combo: &[usize]) -> PathBuf {
    let name = combo
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("-");
    root.join("heads").join(config_id).join(format!("{name}.bin"))
}

/// Writes a checkpoint: one JSON header line followed by the little-endian
/// IEEE-754 float32 parameter blob.
pub fn save_checkpoint(classifier: &MicroClassifier, root: &Path) -> Result<PathBuf, HeadsError> {
    let path = checkpoint_path(root, &classifier.config_id, &classifier.combo);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HeadsError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let header = CheckpointHeader {
        config_id: classifier.config_id.clone(),
        combo: classifier.combo.clone(),
        input_dim: classifier.input_dim,
        hidden_dim: classifier.hidden_dim,
        theta: classifier.theta,
        seed: classifier.seed,
        train_accuracy: classifier.train_accuracy,
        val_accuracy: classifier.val_accuracy,
        param_count: classifier.param_count(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| HeadsError::Checkpoint(e.to_string()))?;
    bytes.push(b'\n');
    for p in &classifier.params {
        bytes.write_all(&(*p as f32).to_le_bytes()).unwrap();
    }
    fs::write(&path, bytes).map_err(|e| HeadsError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

/// Loads a checkpoint, validating the parameter count against both the blob
/// length and the head dimensions.
pub fn load_checkpoint(path: &Path) -> Result<MicroClassifier, HeadsError> {
    let bytes = fs::read(path).map_err(|e| HeadsError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| HeadsError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| HeadsError::Checkpoint(format!("bad header: {e}")))?;
    let expected =
        head_pair_param_count(header.input_dim, header.hidden_dim, header.combo.len());
    if header.param_count != expected {
        return Err(HeadsError::Checkpoint(format!(
            "header declares {} parameters, dimensions imply {expected}",
            header.param_count
        )));
    }
    let blob = &bytes[newline + 1..];
    if blob.len() != expected * 4 {
        return Err(HeadsError::Checkpoint(format!(
            "blob holds {} bytes, expected {}",
            blob.len(),
            expected * 4
        )));
    }
    let params: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(MicroClassifier {
        config_id: header.config_id,
        combo: header.combo,
        input_dim: header.input_dim,
        hidden_dim: header.hidden_dim,
        theta: header.theta,
        train_accuracy: header.train_accuracy,
        val_accuracy: header.val_accuracy,
        seed: header.seed,
        params,
    })
}
