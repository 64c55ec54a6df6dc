//! Acceptance suite: one test per release gate, each printing a
//! `[acceptance]` line on success (run with `--nocapture` to see them).
//!
//! Gates cover: patch-size and depth-rule conformance, the reference-table
//! DR identity, finite-difference gradient fidelity, brute-force oracles for
//! every evaluation metric, a synthetic end-to-end training run with quality
//! and discrimination thresholds, scale invariance, bit-exact round trips,
//! and case-protocol conformance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlfv::dataset;
use tlfv::evalrep::{self, Polarity, ScoreSet};
use tlfv::forensic::{self, CaseConfig, ForensicCase, PopulationSet, Truth};
use tlfv::net::{self, NetConfig, Network, EMBEDDING_DIM};
use tlfv::quality::{self, LabeledEmbeddingSet};
use tlfv::spectrogram::{self, SpectrogramConfig, SpectrogramPatch, N_BINS};
use tlfv::triplet;

fn pass(n: u32, name: &str) {
    println!("[acceptance] criterion {n} ({name}): PASS");
}

// --- criterion 1 -----------------------------------------------------------

#[test]
fn criterion_1_patch_size_conformance() {
    let started = std::time::Instant::now();
    let grid: [(u64, u64, usize); 9] = [
        (1000, 25, 40),
        (1000, 33, 30),
        (1000, 50, 20),
        (1500, 25, 60),
        (1500, 33, 45),
        (1500, 50, 30),
        (2000, 25, 80),
        (2000, 33, 60),
        (2000, 50, 40),
    ];
    for (t, h, want) in grid {
        assert_eq!(
            spectrogram::patch_width(t, h),
            want,
            "patch width for t={t} h={h}"
        );
    }
    assert!(started.elapsed().as_secs_f64() < 1.0);
    pass(1, "patch-size conformance");
}

// --- criterion 2 -----------------------------------------------------------

#[test]
fn criterion_2_depth_rule_conformance() {
    for w in [40usize, 45, 60, 80] {
        assert_eq!(NetConfig::blocks_for_width(w), 5, "width {w}");
        assert_eq!(NetConfig::for_width(w, 0).unwrap().n_blocks, 5);
    }
    for w in [20usize, 30] {
        assert_eq!(NetConfig::blocks_for_width(w), 4, "width {w}");
        assert_eq!(NetConfig::for_width(w, 0).unwrap().n_blocks, 4);
    }
    pass(2, "depth-rule conformance");
}

// --- criterion 3 -----------------------------------------------------------

/// Two 1-D speaker clusters: spread `r` around centroids `c` apart gives
/// IAD = r and OAD = c exactly, so the computed DR is r/c.
fn two_speaker_set(r: f64, c: f64) -> LabeledEmbeddingSet {
    LabeledEmbeddingSet::new(
        vec![
            vec![-r, 0.0],
            vec![r, 0.0],
            vec![c - r, 0.0],
            vec![c + r, 0.0],
        ],
        vec!["a".into(), "a".into(), "b".into(), "b".into()],
    )
    .unwrap()
}

#[test]
fn criterion_3_dr_identity_on_reference_table() {
    // (iad, oad, dr) triples as printed in the reference results tables
    let rows: [(f64, f64, f64); 13] = [
        // training-duration table
        (4.77, 27.61, 0.1730),
        (4.61, 26.62, 0.1732),
        (4.85, 27.88, 0.1742),
        // segment-parameter sweep table
        (3.21, 22.17, 0.1445),
        (3.60, 19.36, 0.1860),
        (4.68, 23.21, 0.2018),
        (3.57, 25.74, 0.1386),
        (3.42, 21.31, 0.1605),
        (3.98, 23.46, 0.1695),
        (4.69, 30.24, 0.1541),
        (4.44, 29.70, 0.1495),
        (4.77, 27.60, 0.2019),
        // final evaluation row
        (4.46, 28.68, 0.1555),
    ];
    let mut violations = Vec::new();
    for (iad, oad, printed_dr) in rows {
        let report = quality::compute_quality(&two_speaker_set(iad, oad)).unwrap();
        assert!((report.iad - iad).abs() < 1e-9);
        assert!((report.oad - oad).abs() < 1e-9);
        assert_eq!(report.dr, report.iad / report.oad);
        let deviation = (report.dr - printed_dr).abs();
        if deviation > 5e-4 {
            violations.push(format!(
                "({iad}, {oad}) -> computed {:.5} vs printed {printed_dr} (deviation {deviation:.2e})",
                report.dr
            ));
        }
    }
    if !violations.is_empty() {
        println!("[acceptance] criterion 3 (DR identity): FAIL");
        for v in &violations {
            println!("    internally inconsistent reference row: {v}");
        }
        panic!(
            "{} of 13 reference rows do not satisfy the printed-ratio identity within 5e-4; \
             the computed ratio is exact for the printed numerator/denominator, so these \
             printed DR values cannot be reproduced from their own printed pairs",
            violations.len()
        );
    }
    pass(3, "DR identity");
}

// --- criterion 4 -----------------------------------------------------------

/// Verification net for finite differences: all ReLUs strongly active for
/// the fixture inputs and an O(1) loss scale. Along a single-parameter
/// perturbation every pre-activation is piecewise affine, so unchanged ReLU
/// masks and pool argmaxes at both interval ends prove the interval is
/// kink-free and central differences are exact up to rounding.
fn fd_fixture(net_seed: u64, inputs: &[&[f32]]) -> Network<f64> {
    let mut cfg = NetConfig::for_width(16, net_seed).unwrap();
    cfg.channels = vec![1, 1, 2, 2];
    let mut net = net::build::<f64>(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(net_seed ^ 0xF1C7);
    for b in 0..4usize {
        for v in net.params[2 * b].data.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        for v in net.params[2 * b + 1].data.iter_mut() {
            *v = 0.0;
        }
    }
    for b in 0..4usize {
        let (_, cache) = net.forward_training(inputs).unwrap();
        let peak = cache
            .post_relu_values(b)
            .into_iter()
            .fold(0.0f64, f64::max)
            .max(1e-6);
        let n_ch = net.params[2 * b + 1].data.len();
        for (ch, v) in net.params[2 * b + 1].data.iter_mut().enumerate() {
            *v = 1.5 * peak * (1.0 + 0.03 * ch as f64 / n_ch as f64);
        }
    }
    let (_, cache) = net.forward_training(inputs).unwrap();
    let gap_peak = cache
        .post_relu_values(3)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let dense_w = net.params.len() - 2;
    let dense_b = net.params.len() - 1;
    let bound = 1.0 / gap_peak;
    for v in net.params[dense_w].data.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    for v in net.params[dense_b].data.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    net
}

fn random_patch_values(width: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..width * N_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn upstream_grads() -> Vec<Vec<f64>> {
    (0..2)
        .map(|k| {
            (0..EMBEDDING_DIM)
                .map(|i| (((i + 31 * k) % 17) as f64 - 8.0) / 9.0)
                .collect()
        })
        .collect()
}

fn pattern_and_loss(net: &Network<f64>, inputs: &[&[f32]]) -> (f64, Vec<bool>, Vec<u32>) {
    let upstream = upstream_grads();
    let (outs, cache) = net.forward_training(inputs).unwrap();
    let mut masks = Vec::new();
    let mut args = Vec::new();
    for b in 0..net.config.n_blocks {
        masks.extend(cache.relu_mask(b));
        args.extend_from_slice(cache.pool_argmax(b));
    }
    let loss: f64 = outs
        .iter()
        .zip(&upstream)
        .map(|(o, g)| o.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    (loss, masks, args)
}

#[test]
fn criterion_4_gradient_fidelity() {
    let started = std::time::Instant::now();
    let inputs_owned = [random_patch_values(16, 5), random_patch_values(16, 6)];
    let inputs: Vec<&[f32]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
    let upstream = upstream_grads();
    let mut net = fd_fixture(0, &inputs);

    let (_, cache) = net.forward_training(&inputs).unwrap();
    let dead: usize = (0..4)
        .map(|b| cache.relu_mask(b).iter().filter(|&&m| !m).count())
        .sum();
    assert_eq!(dead, 0, "fixture must keep every unit active");
    let grads = net.backward(&cache, &upstream).unwrap();
    let (_, base_masks, base_args) = pattern_and_loss(&net, &inputs);

    let eps = 1e-3;
    let mut checked = 0usize;
    for t in 0..net.params.len() {
        for i in 0..net.params[t].data.len() {
            let orig = net.params[t].data[i];
            net.params[t].data[i] = orig + eps;
            let (up, m1, a1) = pattern_and_loss(&net, &inputs);
            net.params[t].data[i] = orig - eps;
            let (down, m2, a2) = pattern_and_loss(&net, &inputs);
            net.params[t].data[i] = orig;
            assert!(
                m1 == base_masks && m2 == base_masks && a1 == base_args && a2 == base_args,
                "tensor {t} index {i}: the finite-difference interval crosses a kink"
            );
            let fd = (up - down) / (2.0 * eps);
            let bp = grads[t][i];
            let denom = fd.abs().max(bp.abs()).max(1e-6);
            assert!(
                (fd - bp).abs() <= 1e-3 * denom,
                "tensor {t} index {i}: fd {fd:.9e} vs bp {bp:.9e}"
            );
            checked += 1;
        }
    }
    assert!(checked > 3000, "only {checked} parameters checked");
    assert!(
        started.elapsed().as_secs_f64() < 120.0,
        "gradient check took {:?}",
        started.elapsed()
    );
    pass(4, "gradient fidelity");
}

// --- criterion 5 -----------------------------------------------------------

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn naive_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut m = vec![0.0; dim];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.into_iter().map(|v| v / rows.len() as f64).collect()
}

/// Silhouette straight from the definition, quadratic loops.
fn msc_oracle(embeddings: &[Vec<f64>], labels: &[String]) -> f64 {
    let n = embeddings.len();
    let uniq: Vec<&String> = {
        let mut u: Vec<&String> = labels.iter().collect();
        u.sort();
        u.dedup();
        u
    };
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
        if own.len() == 1 {
            continue;
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(&embeddings[i], &embeddings[j]))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let mut b = f64::INFINITY;
        for &other in &uniq {
            if *other == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| &labels[j] == other).collect();
            b = b.min(
                members
                    .iter()
                    .map(|&j| dist(&embeddings[i], &embeddings[j]))
                    .sum::<f64>()
                    / members.len() as f64,
            );
        }
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[test]
fn criterion_5_metric_oracles() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);

    for instance in 0..20 {
        // labeled clusters for MSC and centroid
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        let clusters = rng.gen_range(2..5usize);
        for c in 0..clusters {
            let center: Vec<f64> = (0..5).map(|_| rng.gen_range(-8.0..8.0)).collect();
            for _ in 0..rng.gen_range(2..8usize) {
                embeddings.push(
                    center
                        .iter()
                        .map(|v| v + rng.gen_range(-2.0..2.0))
                        .collect::<Vec<f64>>(),
                );
                labels.push(format!("s{c}"));
            }
        }
        let set = LabeledEmbeddingSet::new(embeddings.clone(), labels.clone()).unwrap();
        let report = quality::compute_quality(&set).unwrap();
        let want_msc = msc_oracle(&embeddings, &labels);
        assert!(
            (report.msc - want_msc).abs() < 1e-9,
            "instance {instance}: msc {} vs {want_msc}",
            report.msc
        );

        // centroid against a naive independent mean
        let got_centroid =
            quality::centroid(embeddings.iter().map(|e| e.as_slice())).unwrap();
        let want_centroid = naive_mean(&embeddings);
        for (g, w) in got_centroid.iter().zip(&want_centroid) {
            assert!((g - w).abs() < 1e-9);
        }

        // score-set statistics: quantized scores force ties
        let n_g = rng.gen_range(5..40usize);
        let n_i = rng.gen_range(5..40usize);
        let quant = |x: f64| (x * 25.0).round() / 25.0;
        let genuine: Vec<f64> = (0..n_g).map(|_| quant(rng.gen_range(0.0..1.0))).collect();
        let impostor: Vec<f64> = (0..n_i).map(|_| quant(rng.gen_range(-0.2..0.8))).collect();
        let scores = ScoreSet::new(genuine.clone(), impostor.clone(), Polarity::HigherIsGenuine);

        // AUC vs pairwise count
        let got_auc = evalrep::auc(&scores).unwrap();
        let mut wins = 0.0;
        for &g in &genuine {
            for &i in &impostor {
                wins += if g > i {
                    1.0
                } else if g == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let want_auc = wins / (n_g * n_i) as f64;
        assert!((got_auc - want_auc).abs() < 1e-9);

        // DET points vs threshold enumeration
        let got_curve = evalrep::det_curve(&scores).unwrap();
        let mut thresholds = vec![f64::NEG_INFINITY];
        let mut pooled: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pooled.dedup();
        thresholds.extend(pooled);
        thresholds.push(f64::INFINITY);
        assert_eq!(got_curve.len(), thresholds.len());
        for (point, t) in got_curve.iter().zip(&thresholds) {
            let fmr = impostor.iter().filter(|&&s| s >= *t).count() as f64 / n_i as f64;
            let fnmr = genuine.iter().filter(|&&s| s < *t).count() as f64 / n_g as f64;
            assert_eq!(point.threshold, *t);
            assert!((point.fmr - fmr).abs() < 1e-9);
            assert!((point.fnmr - fnmr).abs() < 1e-9);
        }

        // EER vs an independent sweep over the same thresholds
        let (got_eer, _) = evalrep::eer(&scores).unwrap();
        let want_eer = {
            let rates: Vec<(f64, f64)> = thresholds
                .iter()
                .map(|&t| {
                    (
                        impostor.iter().filter(|&&s| s >= t).count() as f64 / n_i as f64,
                        genuine.iter().filter(|&&s| s < t).count() as f64 / n_g as f64,
                    )
                })
                .collect();
            let mut found = f64::NAN;
            for w in rates.windows(2) {
                let d1 = w[0].0 - w[0].1;
                let d2 = w[1].0 - w[1].1;
                if d1 == 0.0 {
                    found = w[0].0;
                    break;
                }
                if d2 == 0.0 {
                    found = w[1].0;
                    break;
                }
                if d1 > 0.0 && d2 < 0.0 {
                    let alpha = d1 / (d1 - d2);
                    found = w[0].0 + alpha * (w[1].0 - w[0].0);
                    break;
                }
            }
            found
        };
        assert!(
            (got_eer - want_eer).abs() < 1e-9,
            "instance {instance}: eer {got_eer} vs {want_eer}"
        );

        // sensitivity index vs direct recomputation
        let got_dp = evalrep::d_prime(&scores).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let svar = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let want_dp = (mean(&genuine) - mean(&impostor)).abs()
            / ((svar(&genuine) + svar(&impostor)) / 2.0).sqrt();
        assert!((got_dp - want_dp).abs() < 1e-9);

        // lr_dr vs full brute force
        let dim = 4;
        let mut mk = |k: usize| -> Vec<Vec<f64>> {
            (0..k)
                .map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect()
        };
        let reference = mk(5);
        let questioned = mk(3);
        let population: Vec<Vec<Vec<f64>>> = (0..6).map(|_| mk(4)).collect();
        let case = ForensicCase {
            case_id: format!("oracle-{instance}"),
            truth: Truth::Genuine,
            reference_speaker: "r".into(),
            questioned_speaker: "q".into(),
            reference: reference.clone(),
            questioned: questioned.clone(),
            population: population
                .iter()
                .enumerate()
                .map(|(i, samples)| PopulationSet {
                    speaker_id: format!("p{i}"),
                    samples: samples.clone(),
                })
                .collect(),
        };
        let (got_lr_dr, _) = forensic::lr_dr(&case).unwrap();
        let q = naive_mean(&questioned);
        let r = naive_mean(&reference);
        let want_lr_dr = population
            .iter()
            .map(|p| dist(&q, &naive_mean(p)))
            .fold(f64::INFINITY, f64::min)
            / dist(&r, &q);
        assert!((got_lr_dr - want_lr_dr).abs() < 1e-9);
    }

    assert!(
        started.elapsed().as_secs_f64() < 60.0,
        "oracle suite took {:?}",
        started.elapsed()
    );
    pass(5, "metric oracles");
}

// --- criterion 6 -----------------------------------------------------------

fn run_cli(args: &[&str]) -> u8 {
    let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    tlfv::cli::dispatch(&owned)
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn criterion_6_synthetic_end_to_end() {
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let patches = root.join("patches");
    let ckpt = root.join("net.tlfv");
    let loss_csv = root.join("loss.csv");
    let quality_json = root.join("quality.json");
    let roster = root.join("roster.json");
    let scores = root.join("scores.csv");
    let report_dir = root.join("report");

    let p = |path: &Path| path.to_str().unwrap().to_string();

    // 20 synthetic speakers x 10 utterances; 15 train / 5 held out
    assert_eq!(
        run_cli(&[
            "dataset", "synth", "--out", &p(&corpus), "--speakers", "20",
            "--utterances", "10", "--seed", "900",
        ]),
        0
    );
    let split = [
        "--fractions", "0.75,0.25,0", "--split-seed", "17",
    ];
    assert_eq!(
        run_cli(&[
            "preprocess", "--manifest", &p(&corpus.join("manifest.jsonl")),
            "--out", &p(&patches), "--split", "train", &split[0], split[1], split[2], split[3],
            "--t-ms", "2000", "--w-ms", "100", "--h-ms", "50",
            "--seed", "31",
        ]),
        0
    );
    assert_eq!(
        run_cli(&[
            "train", "--patches", &p(&patches), "--out", &p(&ckpt),
            "--loss-csv", &p(&loss_csv), "--steps", "800", "--margin", "2",
            "--seed", "32", "--init-seed", "33",
        ]),
        0
    );

    // loss improvement: mean over the last 50 steps < mean over the first 50
    let trace: Vec<f64> = std::fs::read_to_string(&loss_csv)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("step,"))
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .collect();
    assert_eq!(trace.len(), 800);
    let first50: f64 = trace[..50].iter().sum::<f64>() / 50.0;
    let last50: f64 = trace[750..].iter().sum::<f64>() / 50.0;
    assert!(
        last50 < first50,
        "no loss improvement: first-50 mean {first50:.4}, last-50 mean {last50:.4}"
    );

    // quality gates on the 5 held-out speakers
    assert_eq!(
        run_cli(&[
            "quality", "--checkpoint", &p(&ckpt),
            "--manifest", &p(&corpus.join("manifest.jsonl")),
            "--split", "validation", &split[0], split[1], split[2], split[3],
            "--seed", "34", "--out", &p(&quality_json),
        ]),
        0
    );
    let q = read_json(&quality_json);
    let msc = q["report"]["msc"].as_f64().unwrap();
    let dr = q["report"]["dr"].as_f64().unwrap();
    assert_eq!(q["report"]["n_speakers"].as_u64().unwrap(), 5);
    assert!(msc > 0.1, "held-out msc {msc:.4} <= 0.1");
    assert!(dr < 0.5, "held-out dr {dr:.4} >= 0.5");

    // 50 genuine + 50 impostor cases over the held-out speakers
    assert_eq!(
        run_cli(&[
            "cases", "--manifest", &p(&corpus.join("manifest.jsonl")),
            "--split", "validation", &split[0], split[1], split[2], split[3],
            "--population", "3", "--rounds", "10", "--seed", "35",
            "--out", &p(&roster),
        ]),
        0
    );
    let roster_json = read_json(&roster);
    assert_eq!(roster_json["cases"].as_array().unwrap().len(), 100);

    assert_eq!(
        run_cli(&[
            "score", "--roster", &p(&roster), "--checkpoint", &p(&ckpt),
            "--manifest", &p(&corpus.join("manifest.jsonl")),
            "--seed", "36", "--out", &p(&scores),
        ]),
        0
    );
    assert_eq!(
        run_cli(&[
            "report", "--scores", &p(&scores), "--out-dir", &p(&report_dir),
        ]),
        0
    );
    let summary = read_json(&report_dir.join("summary.json"));
    let auc_dr = summary["lr_dr"]["auc"].as_f64().unwrap();
    assert!(auc_dr >= 0.90, "auc(lr_dr) {auc_dr:.4} < 0.90");

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() <= 20 * 60,
        "end-to-end run took {elapsed:?}"
    );
    println!(
        "[acceptance] criterion 6 detail: first50 {first50:.4} last50 {last50:.4} msc {msc:.4} dr {dr:.4} auc(lr_dr) {auc_dr:.4} elapsed {elapsed:?}"
    );
    pass(6, "synthetic end-to-end");
}

// --- criterion 7 -----------------------------------------------------------

#[test]
fn criterion_7_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CA1E);
    // labeled clusters
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for c in 0..6 {
        let center: Vec<f64> = (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect();
        for _ in 0..8 {
            embeddings.push(
                center
                    .iter()
                    .map(|v| v + rng.gen_range(-1.5..1.5))
                    .collect::<Vec<f64>>(),
            );
            labels.push(format!("s{c}"));
        }
    }
    let set = LabeledEmbeddingSet::new(embeddings.clone(), labels.clone()).unwrap();
    let scaled = set.scaled(3.7);

    // DR and MSC
    let base_q = quality::compute_quality(&set).unwrap();
    let scaled_q = quality::compute_quality(&scaled).unwrap();
    assert!((base_q.dr - scaled_q.dr).abs() < 1e-9);
    assert!((base_q.msc - scaled_q.msc).abs() < 1e-9);

    // lr_d with recalibration, lr_dr directly, and EER/AUC of the resulting
    // score sets, over a batch of synthetic cases
    let scale_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().map(|v| v * 3.7).collect())
            .collect()
    };
    let cal_base = forensic::calibrate_n(&set).unwrap();
    let cal_scaled = forensic::calibrate_n(&scaled).unwrap();

    let mut scores_base = (Vec::new(), Vec::new());
    let mut scores_scaled = (Vec::new(), Vec::new());
    let mut lr_d_base = Vec::new();
    let mut lr_d_scaled = Vec::new();
    fn cloud(rng: &mut ChaCha8Rng, center: f64, k: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| (0..8).map(|_| center + rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }
    for case_idx in 0..24 {
        let genuine = case_idx % 2 == 0;
        let ref_center = rng.gen_range(-5.0..5.0);
        let reference = cloud(&mut rng, ref_center, 5);
        let questioned = if genuine {
            cloud(&mut rng, ref_center + 0.3, 4)
        } else {
            let offset = rng.gen_range(4.0..9.0);
            cloud(&mut rng, ref_center + offset, 4)
        };
        let population: Vec<Vec<Vec<f64>>> = (0..5)
            .map(|_| {
                let center = rng.gen_range(-12.0..12.0);
                cloud(&mut rng, center, 4)
            })
            .collect();

        let build = |reference: Vec<Vec<f64>>,
                     questioned: Vec<Vec<f64>>,
                     population: Vec<Vec<Vec<f64>>>| ForensicCase {
            case_id: format!("c{case_idx}"),
            truth: if genuine { Truth::Genuine } else { Truth::Impostor },
            reference_speaker: "r".into(),
            questioned_speaker: "q".into(),
            reference,
            questioned,
            population: population
                .into_iter()
                .enumerate()
                .map(|(i, samples)| PopulationSet {
                    speaker_id: format!("p{i}"),
                    samples,
                })
                .collect(),
        };
        let case = build(reference.clone(), questioned.clone(), population.clone());
        let case_scaled = build(
            scale_rows(&reference),
            scale_rows(&questioned),
            population.iter().map(|p| scale_rows(p)).collect(),
        );

        let (dr_value, _) = forensic::lr_dr(&case).unwrap();
        let (dr_scaled, _) = forensic::lr_dr(&case_scaled).unwrap();
        assert!(
            (dr_value - dr_scaled).abs() <= 1e-9 * dr_value.abs().max(1.0),
            "lr_dr {dr_value} vs {dr_scaled}"
        );

        let d_value = forensic::lr_d(&case, &cal_base).unwrap();
        let d_scaled = forensic::lr_d(&case_scaled, &cal_scaled).unwrap();
        lr_d_base.push(d_value);
        lr_d_scaled.push(d_scaled);

        if genuine {
            scores_base.0.push(dr_value);
            scores_scaled.0.push(dr_scaled);
        } else {
            scores_base.1.push(dr_value);
            scores_scaled.1.push(dr_scaled);
        }
    }

    // lr_d unchanged after recalibration of N
    for (a, b) in lr_d_base.iter().zip(&lr_d_scaled) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "lr_d {a} vs {b}");
    }

    let base_set = ScoreSet::new(scores_base.0, scores_base.1, Polarity::HigherIsGenuine);
    let scaled_set = ScoreSet::new(scores_scaled.0, scores_scaled.1, Polarity::HigherIsGenuine);
    let (eer_a, _) = evalrep::eer(&base_set).unwrap();
    let (eer_b, _) = evalrep::eer(&scaled_set).unwrap();
    let auc_a = evalrep::auc(&base_set).unwrap();
    let auc_b = evalrep::auc(&scaled_set).unwrap();
    assert!((eer_a - eer_b).abs() < 1e-9);
    assert!((auc_a - auc_b).abs() < 1e-9);
    pass(7, "scale invariance");
}

// --- criterion 8 -----------------------------------------------------------

#[test]
fn criterion_8_round_trips() {
    // WAV write -> parse bit-exact
    let n = 16_000;
    let clip = tlfv::audio::AudioClip::new(
        (0..n)
            .map(|i| {
                (0.6 * (2.0 * std::f64::consts::PI * 317.0 * i as f64 / 16_000.0).sin()) as f32
            })
            .collect(),
        16_000,
        "tone",
    );
    let once = tlfv::audio::parse_wav(&tlfv::audio::write_wav(&clip), "rt").unwrap();
    let twice = tlfv::audio::parse_wav(&tlfv::audio::write_wav(&once), "rt").unwrap();
    assert_eq!(once.samples, twice.samples);

    // checkpoint save -> load -> forward bit-exact
    let dir = tempfile::tempdir().unwrap();
    let net = net::build::<f32>(NetConfig::for_width(20, 77).unwrap()).unwrap();
    let patch = SpectrogramPatch {
        values: random_patch_values(20, 9),
        width: 20,
        config: SpectrogramConfig::new(1000, 100, 50).unwrap(),
        start_ms: 0,
        source_id: "p".into(),
        speaker_id: None,
    };
    let before = net.forward(&patch).unwrap();
    let ckpt = dir.path().join("w20.tlfv");
    net::save_checkpoint(&net, &ckpt).unwrap();
    let loaded = net::load_checkpoint(&ckpt).unwrap();
    let after = loaded.forward(&patch).unwrap();
    assert_eq!(before.values, after.values);

    // full pipeline, run twice with identical seeds: byte-identical artifacts
    let run = |root: &Path| {
        let corpus = root.join("corpus");
        let patches = root.join("patches");
        let ckpt = root.join("net.tlfv");
        let p = |path: &std::path::PathBuf| path.to_str().unwrap().to_string();
        assert_eq!(
            run_cli(&[
                "dataset", "synth", "--out", &p(&corpus), "--speakers", "6",
                "--utterances", "4", "--seed", "400", "--duration-s", "3.0",
            ]),
            0
        );
        assert_eq!(
            run_cli(&[
                "preprocess", "--manifest", &p(&corpus.join("manifest.jsonl")),
                "--out", &p(&patches), "--split", "all",
                "--t-ms", "1000", "--w-ms", "100", "--h-ms", "50",
                "--patches-per-recording", "10", "--seed", "41",
            ]),
            0
        );
        assert_eq!(
            run_cli(&[
                "train", "--patches", &p(&patches), "--out", &p(&ckpt),
                "--loss-csv", &p(&root.join("loss.csv")), "--steps", "12",
                "--seed", "42", "--init-seed", "43",
            ]),
            0
        );
        assert_eq!(
            run_cli(&[
                "cases", "--manifest", &p(&corpus.join("manifest.jsonl")),
                "--split", "all", "--population", "2", "--seed", "44",
                "--patches-per-recording", "10",
                "--out", &p(&root.join("roster.json")),
            ]),
            0
        );
        assert_eq!(
            run_cli(&[
                "score", "--roster", &p(&root.join("roster.json")),
                "--checkpoint", &p(&ckpt),
                "--manifest", &p(&corpus.join("manifest.jsonl")),
                "--t-ms", "1000", "--w-ms", "100", "--h-ms", "50",
                "--seed", "45", "--out", &p(&root.join("scores.csv")),
            ]),
            0
        );
        assert_eq!(
            run_cli(&[
                "report", "--scores", &p(&root.join("scores.csv")),
                "--out-dir", &p(&root.join("report")),
            ]),
            0
        );
        assert_eq!(
            run_cli(&[
                "project", "--checkpoint", &p(&ckpt),
                "--manifest", &p(&corpus.join("manifest.jsonl")),
                "--split", "all", "--t-ms", "1000", "--w-ms", "100", "--h-ms", "50",
                "--patches-per-recording", "10",
                "--seed", "46", "--out", &p(&root.join("projection.csv")),
            ]),
            0
        );
    };
    // identical invocation at the identical location, run twice
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let artifacts = [
        "corpus/manifest.jsonl",
        "patches/index.jsonl",
        "patches/patches-00000.bin",
        "net.tlfv",
        "net.tlfv.calibration.json",
        "loss.csv",
        "roster.json",
        "scores.csv",
        "report/summary.json",
        "report/det_lr_dr.csv",
        "report/roc_lr_d.csv",
        "report/hist_lr_dr.csv",
        "projection.csv",
    ];
    std::fs::create_dir_all(&root).unwrap();
    run(&root);
    let first: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|a| std::fs::read(root.join(a)).unwrap())
        .collect();
    std::fs::remove_dir_all(&root).unwrap();
    std::fs::create_dir_all(&root).unwrap();
    run(&root);
    for (artifact, bytes) in artifacts.iter().zip(&first) {
        let again = std::fs::read(root.join(artifact)).unwrap();
        assert_eq!(
            &again, bytes,
            "artifact {artifact} differs between identical runs"
        );
    }
    pass(8, "round trips");
}

// --- criterion 9 -----------------------------------------------------------

#[test]
fn criterion_9_protocol_conformance() {
    // 218 eligible speakers with 4 recordings each, plus 100 population-only
    // speakers with 3 recordings each: 318 total
    let mut recordings: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in 0..218 {
        recordings.insert(
            format!("eligible{s:03}"),
            (0..4).map(|r| format!("eligible{s:03}-rec{r}")).collect(),
        );
    }
    for s in 0..100 {
        recordings.insert(
            format!("poponly{s:03}"),
            (0..3).map(|r| format!("poponly{s:03}-rec{r}")).collect(),
        );
    }
    let cfg = CaseConfig {
        seed: 2024,
        ..CaseConfig::default()
    };
    let (cases, report) = forensic::build_cases(&recordings, &cfg).unwrap();
    assert_eq!(report.eligible_speakers, 218);
    // the population-only speakers lack a questioned recording and are
    // reported as skipped for case construction, never silently dropped
    assert_eq!(report.skipped_speakers.len(), 100);
    assert!(report
        .skipped_speakers
        .iter()
        .all(|s| s.starts_with("poponly")));
    assert_eq!(
        cases.iter().filter(|c| c.truth == Truth::Genuine).count(),
        218
    );
    assert_eq!(
        cases.iter().filter(|c| c.truth == Truth::Impostor).count(),
        218
    );

    // synthetic embedding store: 15 patches per recording, dimension 8
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store: forensic::EmbeddingStore = BTreeMap::new();
    for (speaker, recs) in &recordings {
        for rec in recs {
            store.insert(
                (speaker.clone(), rec.clone()),
                (0..15)
                    .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            );
        }
    }

    for spec in &cases {
        let case = forensic::assemble_case(spec, &store, &cfg).unwrap();
        assert_eq!(case.reference.len(), 45, "case {}", spec.case_id);
        assert_eq!(case.population.len(), 100, "case {}", spec.case_id);
        for pop in &case.population {
            assert_eq!(pop.samples.len(), 45, "case {}", spec.case_id);
            assert_ne!(pop.speaker_id, case.reference_speaker);
            assert_ne!(pop.speaker_id, case.questioned_speaker);
        }
        match case.truth {
            Truth::Genuine => assert_eq!(case.questioned_speaker, case.reference_speaker),
            Truth::Impostor => assert_ne!(case.questioned_speaker, case.reference_speaker),
        }
    }
    pass(9, "protocol conformance");
}

// --- supporting properties used by several criteria -------------------------

#[test]
fn synthetic_speakers_are_deterministic_and_distinct() {
    let a = dataset::synth_speaker_clip(3, 1, 3.0);
    let b = dataset::synth_speaker_clip(3, 1, 3.0);
    assert_eq!(a.samples, b.samples);
    let c = dataset::synth_speaker_clip(4, 1, 3.0);
    assert_ne!(a.samples, c.samples);
    assert!((dataset::synth_f0_hz(3) - dataset::synth_f0_hz(4)).abs() >= 5.0);
}

#[test]
fn training_patch_sets_group_by_speaker() {
    let cfg = SpectrogramConfig::new(2000, 100, 50).unwrap();
    let patches: Vec<SpectrogramPatch> = (0..6)
        .map(|i| SpectrogramPatch {
            values: random_patch_values(40, i),
            width: 40,
            config: cfg,
            start_ms: 0,
            source_id: format!("rec{i}"),
            speaker_id: Some(format!("spk{}", i % 3)),
        })
        .collect();
    let set = triplet::LabeledPatchSet::from_patches(patches).unwrap();
    assert_eq!(set.n_speakers(), 3);
    assert_eq!(set.n_patches(), 6);
}
