//! Deterministic Gaussian dataset synthesis.
//!
//! Stands in for frozen CNN feature extractors at desk scale: class centers
//! are placed by classical multidimensional scaling so that pairwise center
//! distances match a requested matrix, every sample is a shared base point
//! (center + cluster scatter), and each configuration observes that base
//! point through its own isotropic noise. Cheaper (lower-FLOPs)
//! configurations get larger noise, so accuracy degrades with cost.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    ConfigDescriptor, DatasetError, EmbeddingDataset, EmbeddingMatrix, Manifest, TEST_SPLIT,
    TRAIN_SPLIT, VAL_SPLIT,
};
use crate::rng::rng_from_seed;

/// Per-configuration knobs of the synthesizer.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub flops_m: f64,
    /// Isotropic observation noise added on top of the cluster scatter.
    pub noise_scale: f64,
}

/// Parameters of [`synthesize_gaussian_dataset`].
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// Cluster scatter around each class center (shared by all configs).
    pub cluster_spread: f64,
    /// Symmetric, zero-diagonal matrix of requested center distances.
    pub center_distances: Vec<Vec<f64>>,
    /// Train samples per class; val and test each get half (rounded up).
    pub samples_per_class: usize,
    pub configs: Vec<SynthConfig>,
    pub seed: u64,
}

/// Relative eigenvalue tolerance when deciding embeddability.
const MDS_TOL: f64 = 1e-9;

/// Classical MDS: recovers a centered point configuration from a distance
/// matrix. Errors when the distances are not Euclidean or need more than
/// `dim` dimensions.
fn mds_embed(distances: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>, DatasetError> {
    let n = distances.len();
    let mut b = DMatrix::zeros(n, n);
    // Double-centered squared distances: B = -1/2 * J D^2 J.
    let sq = |i: usize, j: usize| distances[i][j] * distances[i][j];
    let row_means: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| sq(i, j)).sum::<f64>() / n as f64)
        .collect();
    let total_mean = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (sq(i, j) - row_means[i] - row_means[j] + total_mean);
        }
    }
    let eigen = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eigen.eigenvalues[c].total_cmp(&eigen.eigenvalues[a]));
    let max_eig = eigen.eigenvalues[order[0]].max(0.0);
    let tol = MDS_TOL * max_eig.max(1.0);
    let min_eig = eigen.eigenvalues[*order.last().unwrap()];
    if min_eig < -tol {
        return Err(DatasetError::InfeasibleGeometry(format!(
            "distance matrix is not Euclidean (eigenvalue {min_eig:.3e})"
        )));
    }
    let rank = order
        .iter()
        .take_while(|&&i| eigen.eigenvalues[i] > tol)
        .count();
    if rank > dim {
        return Err(DatasetError::InfeasibleGeometry(format!(
            "distances need {rank} dimensions but dim={dim}"
        )));
    }
    let mut centers = vec![vec![0.0; dim]; n];
    for (axis, &col) in order.iter().take(rank).enumerate() {
        let scale = eigen.eigenvalues[col].sqrt();
        // Fix the eigenvector sign so the output does not depend on the
        // eigensolver's internal choices.
        let column = eigen.eigenvectors.column(col);
        let lead = column
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            centers[i][axis] = sign * scale * column[i];
        }
    }
    Ok(centers)
}

fn validate_spec(spec: &GaussianSpec) -> Result<(), DatasetError> {
    if spec.n_classes < 2 {
        return Err(DatasetError::schema("n_classes", "need at least 2 classes"));
    }
    if spec.dim == 0 {
        return Err(DatasetError::schema("dim", "dim must be positive"));
    }
    if spec.samples_per_class == 0 {
        return Err(DatasetError::schema("samples_per_class", "must be positive"));
    }
    if spec.configs.is_empty() {
        return Err(DatasetError::schema("configs", "at least one config"));
    }
    let n = spec.n_classes;
    if spec.center_distances.len() != n
        || spec.center_distances.iter().any(|row| row.len() != n)
    {
        return Err(DatasetError::schema(
            "center_distances",
            format!("expected {n}x{n} matrix"),
        ));
    }
    for i in 0..n {
        if spec.center_distances[i][i] != 0.0 {
            return Err(DatasetError::schema(
                "center_distances",
                "diagonal must be zero",
            ));
        }
        for j in 0..n {
            let d = spec.center_distances[i][j];
            if !d.is_finite() || d < 0.0 {
                return Err(DatasetError::schema(
                    "center_distances",
                    "entries must be finite and non-negative",
                ));
            }
            if (d - spec.center_distances[j][i]).abs() > 1e-12 {
                return Err(DatasetError::schema(
                    "center_distances",
                    "matrix must be symmetric",
                ));
            }
        }
    }
    Ok(())
}

/// Generates a synthetic dataset in memory. Deterministic for a fixed seed;
/// saving it and loading it back reproduces the same values.
pub fn synthesize_gaussian_dataset(spec: &GaussianSpec) -> Result<EmbeddingDataset, DatasetError> {
    validate_spec(spec)?;
    let centers = mds_embed(&spec.center_distances, spec.dim)?;
    let n = spec.n_classes;

    // Config ids follow the input order; costs drive the synthetic
    // pruning/resolution metadata (cheapest config = most pruned).
    let mut flops_rank: Vec<usize> = (0..spec.configs.len()).collect();
    flops_rank.sort_by(|&a, &b| spec.configs[a].flops_m.total_cmp(&spec.configs[b].flops_m));
    let mut rank_of = vec![0usize; spec.configs.len()];
    for (rank, &idx) in flops_rank.iter().enumerate() {
        rank_of[idx] = rank;
    }
    let k = spec.configs.len();
    let configs: Vec<ConfigDescriptor> = spec
        .configs
        .iter()
        .enumerate()
        .map(|(i, sc)| {
            let rank = rank_of[i];
            let frac = if k == 1 { 1.0 } else { rank as f64 / (k - 1) as f64 };
            let mut device_latency_ms = BTreeMap::new();
            device_latency_ms.insert("pi0".to_string(), sc.flops_m);
            device_latency_ms.insert("gap8".to_string(), sc.flops_m * 2.2);
            ConfigDescriptor {
                id: format!("c{i}"),
                pruning_pct: ((1.0 - frac) * 60.0).round() as u8,
                resolution: (32.0 + frac * 96.0).round() as u32,
                flops_m: sc.flops_m,
                embedding_dim: spec.dim,
                device_latency_ms,
                param_bytes_per_weight: 4,
            }
        })
        .collect();

    let split_sizes = [
        (TRAIN_SPLIT, spec.samples_per_class),
        (VAL_SPLIT, spec.samples_per_class.div_ceil(2)),
        (TEST_SPLIT, spec.samples_per_class.div_ceil(2)),
    ];

    let mut rng = rng_from_seed(spec.seed);
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut matrices: Vec<EmbeddingMatrix> = Vec::new();
    for (split, per_class) in split_sizes {
        let mut sample_ids = Vec::new();
        let mut class_indices = Vec::new();
        let mut seq_indices = Vec::new();
        let mut per_config_values: Vec<Vec<f64>> = vec![Vec::new(); k];
        for class in 0..n {
            for j in 0..per_class {
                sample_ids.push(format!("{split}_{class:02}_{j:04}"));
                class_indices.push(class);
                seq_indices.push(-1);
                let base: Vec<f64> = (0..spec.dim)
                    .map(|axis| {
                        let z: f64 = rng.sample(StandardNormal);
                        centers[class][axis] + spec.cluster_spread * z
                    })
                    .collect();
                for (ci, sc) in spec.configs.iter().enumerate() {
                    for b in &base {
                        let z: f64 = rng.sample(StandardNormal);
                        per_config_values[ci].push(b + sc.noise_scale * z);
                    }
                }
            }
        }
        splits.insert(split.to_string(), sample_ids.clone());
        for (ci, values) in per_config_values.into_iter().enumerate() {
            matrices.push(EmbeddingMatrix::from_parts(
                format!("c{ci}"),
                split.to_string(),
                spec.dim,
                sample_ids.clone(),
                class_indices.clone(),
                seq_indices.clone(),
                values,
            ));
        }
    }

    let reference = configs
        .iter()
        .max_by(|a, b| a.flops_m.total_cmp(&b.flops_m))
        .map(|c| c.id.clone());
    let manifest = Manifest {
        dataset_name: "synthetic-gaussian".to_string(),
        classes: (0..n).map(|i| format!("class{i:02}")).collect(),
        configs,
        reference_config: reference,
        splits,
        notes: format!(
            "synthetic gaussian dataset: dim={}, spread={}, seed={}",
            spec.dim, spec.cluster_spread, spec.seed
        ),
        root: Default::default(),
    };
    EmbeddingDataset::from_parts(manifest, matrices)
}

/// Distance matrix of `n` points equally spaced on a circle of the given
/// radius. The configuration is centered at the origin, so angular gaps map
/// monotonically to both center distance and cosine similarity: adjacent
/// classes are similar (hard to tell apart), opposite classes dissimilar.
pub fn circle_distances(n: usize, radius: f64) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let gap = PI * (i as f64 - j as f64) / n as f64;
                d[i][j] = 2.0 * radius * gap.sin().abs();
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::class_representation;

    fn two_class_spec() -> GaussianSpec {
        GaussianSpec {
            n_classes: 2,
            dim: 2,
            cluster_spread: 0.1,
            center_distances: vec![vec![0.0, 10.0], vec![10.0, 0.0]],
            samples_per_class: 40,
            configs: vec![
                SynthConfig { flops_m: 5.0, noise_scale: 0.5 },
                SynthConfig { flops_m: 20.0, noise_scale: 0.1 },
            ],
            seed: 7,
        }
    }

    #[test]
    fn two_separated_classes() {
        let ds = synthesize_gaussian_dataset(&two_class_spec()).unwrap();
        let r0 = class_representation(&ds, "c1", 0).unwrap();
        let r1 = class_representation(&ds, "c1", 1).unwrap();
        let dist: f64 = r0
            .vector
            .iter()
            .zip(&r1.vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 10.0).abs() < 0.5, "center distance {dist}");
    }

    #[test]
    fn identical_seeds_give_byte_identical_files() {
        let spec = two_class_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synthesize_gaussian_dataset(&spec).unwrap().save(d1.path()).unwrap();
        synthesize_gaussian_dataset(&spec).unwrap().save(d2.path()).unwrap();
        for rel in [
            "manifest.json",
            "embeddings/c0/train.csv",
            "embeddings/c1/test.csv",
        ] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "file {rel} differs between identical seeds");
        }
    }

    #[test]
    fn infeasible_geometry_detected() {
        // Three equidistant points need two dimensions.
        let mut spec = two_class_spec();
        spec.n_classes = 3;
        spec.dim = 1;
        spec.center_distances = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        match synthesize_gaussian_dataset(&spec) {
            Err(DatasetError::InfeasibleGeometry(_)) => {}
            other => panic!("expected InfeasibleGeometry, got {other:?}"),
        }
    }

    #[test]
    fn non_euclidean_distances_detected() {
        // Violates the triangle inequality badly.
        let mut spec = two_class_spec();
        spec.n_classes = 3;
        spec.dim = 3;
        spec.center_distances = vec![
            vec![0.0, 1.0, 10.0],
            vec![1.0, 0.0, 1.0],
            vec![10.0, 1.0, 0.0],
        ];
        match synthesize_gaussian_dataset(&spec) {
            Err(DatasetError::InfeasibleGeometry(_)) => {}
            other => panic!("expected InfeasibleGeometry, got {other:?}"),
        }
    }

    #[test]
    fn center_distances_converge_with_samples() {
        let mut spec = two_class_spec();
        spec.samples_per_class = 1000;
        spec.seed = 42;
        let ds = synthesize_gaussian_dataset(&spec).unwrap();
        let r0 = class_representation(&ds, "c1", 0).unwrap();
        let r1 = class_representation(&ds, "c1", 1).unwrap();
        let dist: f64 = r0
            .vector
            .iter()
            .zip(&r1.vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            (dist - 10.0).abs() / 10.0 < 0.05,
            "distance {dist} not within 5% of 10"
        );
    }

    #[test]
    fn circle_distances_match_chords() {
        let d = circle_distances(4, 1.0);
        assert!((d[0][2] - 2.0).abs() < 1e-12); // diameter
        assert!((d[0][1] - 2.0f64.sqrt()).abs() < 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                assert!((d[i][j] - d[j][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn circle_fixture_roundtrips_through_disk() {
        let spec = GaussianSpec {
            n_classes: 5,
            dim: 3,
            cluster_spread: 0.3,
            center_distances: circle_distances(5, 8.0),
            samples_per_class: 12,
            configs: vec![
                SynthConfig { flops_m: 5.0, noise_scale: 1.0 },
                SynthConfig { flops_m: 20.0, noise_scale: 0.2 },
            ],
            seed: 3,
        };
        let ds = synthesize_gaussian_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let reloaded = EmbeddingDataset::load(&dir.path().join("manifest.json")).unwrap();
        let second = tempfile::tempdir().unwrap();
        reloaded.save(second.path()).unwrap();
        for rel in ["embeddings/c0/train.csv", "embeddings/c1/val.csv"] {
            let a = std::fs::read(dir.path().join(rel)).unwrap();
            let b = std::fs::read(second.path().join(rel)).unwrap();
            assert_eq!(a, b, "roundtrip file {rel} differs");
        }
    }
}
