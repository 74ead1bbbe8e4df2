//! Temporary calibration probe for the acceptance fixture. Run with:
//! cargo test --test calibrate -- --ignored --nocapture

use std::collections::BTreeMap;
use std::time::Instant;

use ctxswitch::dataset::synth::{circle_distances, synthesize_gaussian_dataset, GaussianSpec, SynthConfig};
use ctxswitch::dataset::EmbeddingDataset;
use ctxswitch::heads::{evaluate_accuracy, evaluate_fpfn, maxprob_change_detector, predict, train_heads, HeadHyperparams};
use ctxswitch::predictor::enumerate_combinations;
use ctxswitch::similarity::{context_representation, similarity_matrix};
use ctxswitch::simulator::head_seed;
use rayon::prelude::*;

fn fixture() -> EmbeddingDataset {
    synthesize_gaussian_dataset(&GaussianSpec {
        n_classes: 10,
        dim: 4,
        cluster_spread: 0.5,
        center_distances: circle_distances(10, 10.0),
        samples_per_class: 100,
        configs: vec![
            SynthConfig { flops_m: 5.0, noise_scale: 5.0 },
            SynthConfig { flops_m: 10.0, noise_scale: 3.6 },
            SynthConfig { flops_m: 20.0, noise_scale: 2.2 },
            SynthConfig { flops_m: 40.0, noise_scale: 1.1 },
        ],
        seed: 42,
    })
    .unwrap()
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
#[ignore]
fn calibrate_fixture() {
    let t0 = Instant::now();
    let ds = fixture();
    println!("fixture built in {:?}", t0.elapsed());
    let sims = similarity_matrix(&ds, ds.manifest.reference_config_id()).unwrap();
    let combos = enumerate_combinations(10, 3).unwrap();
    println!("{} combos", combos.len());

    let hyper = HeadHyperparams::default();

    // Time a single training.
    let t1 = Instant::now();
    let c = train_heads(&ds, "c1", &[0, 1, 2], &hyper).unwrap();
    println!("single training: {:?}, val_acc {:.3}", t1.elapsed(), c.val_accuracy);

    // Full table: all combos x configs.
    let t2 = Instant::now();
    let ds_ref = &ds;
    let table: BTreeMap<(String, Vec<usize>), (f64, f64)> = combos
        .par_iter()
        .flat_map(|combo| {
            ds_ref
                .manifest
                .configs
                .par_iter()
                .map(move |cfg| {
                    let mut h = hyper;
                    h.seed = head_seed(hyper.seed, &cfg.id, combo);
                    let trained = train_heads(ds_ref, &cfg.id, combo, &h).unwrap();
                    let test_acc = evaluate_accuracy(&trained, ds_ref, "test").unwrap();
                    ((cfg.id.clone(), combo.clone()), (trained.val_accuracy, test_acc))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    println!("full 480-table in {:?}", t2.elapsed());

    // Pearson r per config (test accuracy vs mean sim).
    let means: Vec<f64> = combos
        .iter()
        .map(|c| context_representation(&sims, c).unwrap().mean_sim)
        .collect();
    for cfg in &ds.manifest.configs {
        let accs: Vec<f64> = combos
            .iter()
            .map(|c| table[&(cfg.id.clone(), c.clone())].1)
            .collect();
        let lo = accs.iter().cloned().fold(1.0f64, f64::min);
        let hi = accs.iter().cloned().fold(0.0f64, f64::max);
        println!(
            "config {} (noise): pearson={:.3} acc range [{:.3}, {:.3}]",
            cfg.id,
            pearson(&means, &accs),
            lo,
            hi
        );
    }

    // Scatter at c1: sorted by mean sim.
    let mut scatter: Vec<(f64, f64)> = combos
        .iter()
        .map(|c| {
            (
                context_representation(&sims, c).unwrap().mean_sim,
                table[&("c1".to_string(), c.clone())].1,
            )
        })
        .collect();
    scatter.sort_by(|a, b| a.0.total_cmp(&b.0));
    for chunk in scatter.chunks(12) {
        let ms: f64 = chunk.iter().map(|p| p.0).sum::<f64>() / chunk.len() as f64;
        let ac: f64 = chunk.iter().map(|p| p.1).sum::<f64>() / chunk.len() as f64;
        let amin = chunk.iter().map(|p| p.1).fold(1.0f64, f64::min);
        let amax = chunk.iter().map(|p| p.1).fold(0.0f64, f64::max);
        println!("  sim~{ms:+.3}: acc avg {ac:.3} [{amin:.3},{amax:.3}]");
    }

    // Oracle label distribution at various thresholds (val accuracy).
    for thr in [0.88, 0.90, 0.92, 0.94, 0.96] {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut unmet = 0;
        for combo in &combos {
            let pick = ds
                .manifest
                .configs_by_flops()
                .iter()
                .map(|cfg| (cfg.id.as_str(), table[&(cfg.id.clone(), combo.clone())].0))
                .find(|(_, acc)| *acc >= thr)
                .map(|(id, _)| id);
            match pick {
                Some(id) => *counts.entry(id).or_default() += 1,
                None => unmet += 1,
            }
        }
        println!("thr {thr}: labels {counts:?} unmet {unmet}");
    }

    // Detector comparison at c1 over first 40 combos.
    let t3 = Instant::now();
    let rows: Vec<(f64, f64)> = combos[..40]
        .par_iter()
        .map(|combo| {
            let mut h = hyper;
            h.seed = head_seed(hyper.seed, "c1", combo);
            let trained = train_heads(&ds, "c1", combo, &h).unwrap();
            let (fp, fnr) = evaluate_fpfn(&trained, &ds, "test", 0.5).unwrap();
            // Max-softmax: best threshold in {0.5..0.9}.
            let t = ds.table("c1", "test").unwrap();
            let mut best = f64::INFINITY;
            for thr in [0.5, 0.6, 0.7, 0.8, 0.9] {
                let mut fp_n = 0;
                let mut in_n = 0;
                let mut fn_n = 0;
                let mut out_n = 0;
                for i in 0..t.rows() {
                    let out = predict(&trained, t.row(i)).unwrap();
                    let flagged = maxprob_change_detector(&out.class_probs, thr).unwrap();
                    if combo.contains(&t.class_indices[i]) {
                        in_n += 1;
                        if flagged {
                            fp_n += 1;
                        }
                    } else {
                        out_n += 1;
                        if !flagged {
                            fn_n += 1;
                        }
                    }
                }
                let total = fp_n as f64 / in_n as f64 + fn_n as f64 / out_n as f64;
                best = best.min(total);
            }
            (fp + fnr, best)
        })
        .collect();
    let reg_avg: f64 = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
    let max_avg: f64 = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    println!(
        "detector (40 combos, c1): regression FP+FN {:.4}, maxsoftmax best {:.4} ({:?})",
        reg_avg,
        max_avg,
        t3.elapsed()
    );
}
