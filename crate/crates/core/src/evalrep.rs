//! Score-set evaluation: DET/ROC curves, equal error rate, AUC, the
//! sensitivity index, score histograms, and a 2-D principal-component
//! projection of labeled embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::quality::LabeledEmbeddingSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the {0} score class is empty")]
    EmptyClass(&'static str),
    #[error("need at least two scores per class, got {genuine} genuine / {impostor} impostor")]
    TooFewScores { genuine: usize, impostor: usize },
    #[error("histogram needs at least one bin")]
    ZeroBins,
    #[error("2-D projection needs at least 3 embeddings, got {0}")]
    TooFewEmbeddings(usize),
    #[error("all embeddings are identical; no variance to project")]
    DegenerateVariance,
}

/// Which direction favors the same-speaker hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherIsGenuine,
    LowerIsGenuine,
}

/// Labeled genuine/impostor scores with a declared polarity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    pub polarity: Polarity,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>, polarity: Polarity) -> Self {
        ScoreSet {
            genuine,
            impostor,
            polarity,
        }
    }

    fn check_nonempty(&self) -> Result<(), EvalError> {
        if self.genuine.is_empty() {
            return Err(EvalError::EmptyClass("genuine"));
        }
        if self.impostor.is_empty() {
            return Err(EvalError::EmptyClass("impostor"));
        }
        Ok(())
    }
}

/// Flip lower-is-genuine sets by negation so that downstream statistics can
/// assume higher scores favor the genuine class. Idempotent.
pub fn normalize_polarity(scores: &ScoreSet) -> ScoreSet {
    match scores.polarity {
        Polarity::HigherIsGenuine => scores.clone(),
        Polarity::LowerIsGenuine => ScoreSet {
            genuine: scores.genuine.iter().map(|s| -s).collect(),
            impostor: scores.impostor.iter().map(|s| -s).collect(),
            polarity: Polarity::HigherIsGenuine,
        },
    }
}

/// One DET operating point: at `threshold`, the fraction of impostor scores
/// at or above it (false matches) and of genuine scores below it (false
/// non-matches).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// DET curve with a threshold at every distinct score plus infinite
/// sentinels at both ends. Expects normalized polarity.
pub fn det_curve(scores: &ScoreSet) -> Result<Vec<CurvePoint>, EvalError> {
    debug_assert_eq!(scores.polarity, Polarity::HigherIsGenuine);
    scores.check_nonempty()?;

    let mut genuine = scores.genuine.clone();
    let mut impostor = scores.impostor.clone();
    genuine.sort_by(|a, b| a.partial_cmp(b).unwrap());
    impostor.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = Vec::with_capacity(genuine.len() + impostor.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    let mut pooled: Vec<f64> = genuine.iter().chain(impostor.iter()).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pooled.dedup();
    thresholds.extend(pooled);
    thresholds.push(f64::INFINITY);

    let n_g = genuine.len() as f64;
    let n_i = impostor.len() as f64;
    let points = thresholds
        .into_iter()
        .map(|t| {
            // first index with score >= t
            let imp_at_or_above = impostor.len() - lower_bound(&impostor, t);
            let gen_below = lower_bound(&genuine, t);
            CurvePoint {
                threshold: t,
                fmr: imp_at_or_above as f64 / n_i,
                fnmr: gen_below as f64 / n_g,
            }
        })
        .collect();
    Ok(points)
}

/// Index of the first element `>= x` in an ascending slice.
fn lower_bound(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&v| v < x)
}

/// Equal error rate and its threshold, linearly interpolated between the
/// adjacent DET points where `FMR - FNMR` changes sign. Expects normalized
/// polarity.
pub fn eer(scores: &ScoreSet) -> Result<(f64, f64), EvalError> {
    let curve = det_curve(scores)?;
    // FMR - FNMR starts at +1 and ends at -1
    for w in curve.windows(2) {
        let (p1, p2) = (w[0], w[1]);
        let d1 = p1.fmr - p1.fnmr;
        let d2 = p2.fmr - p2.fnmr;
        if d1 == 0.0 {
            return Ok((p1.fmr, p1.threshold));
        }
        if d2 == 0.0 {
            return Ok((p2.fmr, p2.threshold));
        }
        if d1 > 0.0 && d2 < 0.0 {
            let alpha = d1 / (d1 - d2);
            let rate = p1.fmr + alpha * (p2.fmr - p1.fmr);
            let threshold = if p1.threshold.is_infinite() {
                p2.threshold
            } else if p2.threshold.is_infinite() {
                p1.threshold
            } else {
                p1.threshold + alpha * (p2.threshold - p1.threshold)
            };
            return Ok((rate, threshold));
        }
    }
    // fully separated scores: the crossing is a perfect operating point
    Ok((0.0, curve[curve.len() / 2].threshold))
}

/// Probability that a random genuine score outranks a random impostor score,
/// ties counted half, via the rank-sum formulation. Expects normalized
/// polarity.
pub fn auc(scores: &ScoreSet) -> Result<f64, EvalError> {
    debug_assert_eq!(scores.polarity, Polarity::HigherIsGenuine);
    scores.check_nonempty()?;
    let n_g = scores.genuine.len();
    let n_i = scores.impostor.len();

    let mut pooled: Vec<(f64, bool)> = scores
        .genuine
        .iter()
        .map(|&s| (s, true))
        .chain(scores.impostor.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // average ranks over tie groups; ranks are 1-based
    let mut rank_sum_genuine = 0.0f64;
    let mut i = 0usize;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &pooled[i..j] {
            if item.1 {
                rank_sum_genuine += avg_rank;
            }
        }
        i = j;
    }

    let u = rank_sum_genuine - (n_g * (n_g + 1)) as f64 / 2.0;
    Ok(u / (n_g as f64 * n_i as f64))
}

/// Equal-variance sensitivity index: `|mean_g - mean_i| /
/// sqrt((var_g + var_i) / 2)` with sample variances.
pub fn d_prime(scores: &ScoreSet) -> Result<f64, EvalError> {
    if scores.genuine.len() < 2 || scores.impostor.len() < 2 {
        return Err(EvalError::TooFewScores {
            genuine: scores.genuine.len(),
            impostor: scores.impostor.len(),
        });
    }
    let stats = |v: &[f64]| -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    };
    let (mg, vg) = stats(&scores.genuine);
    let (mi, vi) = stats(&scores.impostor);
    Ok((mg - mi).abs() / ((vg + vi) / 2.0).sqrt())
}

/// Per-class histogram over shared equal-width bins spanning the pooled
/// range. A degenerate range puts all mass in the first bin.
#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub genuine: Vec<u64>,
    pub impostor: Vec<u64>,
}

pub fn histogram(scores: &ScoreSet, bins: usize) -> Result<Histogram, EvalError> {
    if bins == 0 {
        return Err(EvalError::ZeroBins);
    }
    let all = scores.genuine.iter().chain(&scores.impostor);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &s in all {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if scores.genuine.is_empty() && scores.impostor.is_empty() {
        return Err(EvalError::EmptyClass("genuine"));
    }
    let width = (hi - lo) / bins as f64;
    let index = |s: f64| -> usize {
        if width <= 0.0 {
            0
        } else {
            (((s - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut genuine = vec![0u64; bins];
    for &s in &scores.genuine {
        genuine[index(s)] += 1;
    }
    let mut impostor = vec![0u64; bins];
    for &s in &scores.impostor {
        impostor[index(s)] += 1;
    }
    Ok(Histogram {
        lo,
        hi,
        genuine,
        impostor,
    })
}

/// 2-D principal-component projection with the top-2 eigenvalues of the
/// covariance, for plotting embedding clusters.
#[derive(Debug, Clone)]
pub struct Projection2D {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    pub eigenvalues: [f64; 2],
}

/// Project embeddings onto their top-2 variance directions using power
/// iteration with deflation (tolerance 1e-9, deterministic seeded start).
/// Output coordinates are centered.
pub fn project_2d(set: &LabeledEmbeddingSet) -> Result<Projection2D, EvalError> {
    let n = set.embeddings.len();
    if n < 3 {
        return Err(EvalError::TooFewEmbeddings(n));
    }
    let dim = set.embeddings[0].len();
    let mean: Vec<f64> = {
        let mut m = vec![0.0; dim];
        for e in &set.embeddings {
            for (a, v) in m.iter_mut().zip(e) {
                *a += v;
            }
        }
        m.into_iter().map(|v| v / n as f64).collect()
    };
    let centered: Vec<Vec<f64>> = set
        .embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let total_var: f64 = centered
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    if total_var < 1e-18 {
        return Err(EvalError::DegenerateVariance);
    }

    // covariance matvec without forming the matrix: C v = X^T (X v) / n
    let matvec = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for row in &centered {
            let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, r) in out.iter_mut().zip(row) {
                *o += dot * r;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        out
    };

    let normalize = |v: &mut [f64]| -> f64 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        norm
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x50CA);
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut eigenvalues = [0.0f64; 2];
    for comp in 0..2 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for prev in &components {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
        }
        normalize(&mut v);
        let mut lambda = 0.0f64;
        for _ in 0..10_000 {
            let mut next = matvec(&v);
            for prev in &components {
                let dot: f64 = next.iter().zip(prev).map(|(a, b)| a * b).sum();
                next.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
            }
            lambda = normalize(&mut next);
            // sign-align before measuring the step
            let dot: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                next.iter_mut().for_each(|x| *x = -*x);
            }
            let delta: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            v = next;
            if delta < 1e-9 {
                break;
            }
        }
        eigenvalues[comp] = lambda;
        components.push(v);
    }

    let points = centered
        .iter()
        .map(|row| {
            [
                row.iter().zip(&components[0]).map(|(a, b)| a * b).sum(),
                row.iter().zip(&components[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();

    Ok(Projection2D {
        points,
        labels: set.labels.clone(),
        eigenvalues,
    })
}

/// CSV emission helpers shared by the command-line surface.
pub fn write_curve_csv(
    points: &[CurvePoint],
    header: &str,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(out, "# {header}")?;
    writeln!(out, "threshold,fmr,fnmr")?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.fmr, p.fnmr)?;
    }
    Ok(())
}

pub fn write_histogram_csv(
    hist: &Histogram,
    header: &str,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(out, "# {header}")?;
    writeln!(out, "bin_lo,bin_hi,genuine,impostor")?;
    let bins = hist.genuine.len();
    let width = (hist.hi - hist.lo) / bins as f64;
    for i in 0..bins {
        writeln!(
            out,
            "{},{},{},{}",
            hist.lo + width * i as f64,
            hist.lo + width * (i + 1) as f64,
            hist.genuine[i],
            hist.impostor[i]
        )?;
    }
    Ok(())
}

pub fn write_projection_csv(
    proj: &Projection2D,
    header: &str,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(out, "# {header}")?;
    writeln!(out, "x,y,speaker_id")?;
    for (p, l) in proj.points.iter().zip(&proj.labels) {
        writeln!(out, "{},{},{}", p[0], p[1], l)?;
    }
    Ok(())
}
