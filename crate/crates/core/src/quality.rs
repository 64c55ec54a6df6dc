//! Embedding-space quality metrics: inner/outer average distances, their
//! ratio, and the mean silhouette coefficient over speaker clusters.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::triplet::l2;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("empty embedding set")]
    EmptySet,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("labels ({0}) and embeddings ({1}) differ in count")]
    LabelCountMismatch(usize, usize),
    #[error("quality metrics need at least two speakers")]
    SingleSpeaker,
    #[error("outer average distance is zero; the distance ratio is undefined")]
    ZeroOad,
}

/// Embeddings with one speaker label per row.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddingSet {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl LabeledEmbeddingSet {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self, QualityError> {
        if embeddings.is_empty() {
            return Err(QualityError::EmptySet);
        }
        if embeddings.len() != labels.len() {
            return Err(QualityError::LabelCountMismatch(
                labels.len(),
                embeddings.len(),
            ));
        }
        let dim = embeddings[0].len();
        for e in &embeddings {
            if e.len() != dim {
                return Err(QualityError::DimensionMismatch(dim, e.len()));
            }
        }
        Ok(LabeledEmbeddingSet { embeddings, labels })
    }

    pub fn from_embeddings(
        embeddings: impl IntoIterator<Item = crate::net::Embedding>,
    ) -> Result<Self, QualityError> {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for e in embeddings {
            labels.push(e.speaker_id.clone().unwrap_or_default());
            values.push(e.values);
        }
        Self::new(values, labels)
    }

    /// Multiply every coordinate by `c`; used by scale-invariance checks.
    pub fn scaled(&self, c: f64) -> Self {
        LabeledEmbeddingSet {
            embeddings: self
                .embeddings
                .iter()
                .map(|e| e.iter().map(|v| v * c).collect())
                .collect(),
            labels: self.labels.clone(),
        }
    }

    fn by_speaker(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            map.entry(l.as_str()).or_default().push(i);
        }
        map
    }
}

/// Coordinate-wise arithmetic mean of a non-empty set of equal-length rows.
pub fn centroid<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
) -> Result<Vec<f64>, QualityError> {
    let mut iter = rows.into_iter();
    let first = iter.next().ok_or(QualityError::EmptySet)?;
    let mut acc: Vec<f64> = first.to_vec();
    let mut count = 1usize;
    for row in iter {
        if row.len() != acc.len() {
            return Err(QualityError::DimensionMismatch(acc.len(), row.len()));
        }
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeakerQuality {
    pub speaker_id: String,
    pub n_embeddings: usize,
    /// mean distance of this speaker's embeddings to their own centroid
    pub iad: f64,
    /// mean distance of this speaker's embeddings to every other centroid
    pub oad: f64,
    pub mean_silhouette: f64,
}

/// Aggregate quality metrics plus a per-speaker breakdown, so subgroup
/// studies are a filter-then-compute composition.
#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    pub iad: f64,
    pub oad: f64,
    pub dr: f64,
    pub msc: f64,
    pub n_speakers: usize,
    pub n_embeddings: usize,
    pub per_speaker: Vec<SpeakerQuality>,
}

impl QualityReport {
    /// One CSV row matching [`QualityReport::csv_header`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iad, self.oad, self.dr, self.msc, self.n_speakers, self.n_embeddings
        )
    }

    pub fn csv_header() -> &'static str {
        "iad,oad,dr,msc,n_speakers,n_embeddings"
    }
}

/// Compute IAD, OAD, DR = IAD/OAD, and the mean silhouette coefficient.
///
/// IAD and OAD are centroid-based: per speaker, the mean distance of their
/// embeddings to the own centroid (IAD) and to every other speaker's
/// centroid (OAD), then averaged over speakers. Silhouettes use the standard
/// member-to-member formulation with singleton clusters contributing zero.
pub fn compute_quality(set: &LabeledEmbeddingSet) -> Result<QualityReport, QualityError> {
    let groups = set.by_speaker();
    if groups.len() < 2 {
        return Err(QualityError::SingleSpeaker);
    }

    let speakers: Vec<&str> = groups.keys().copied().collect();
    let centroids: Vec<Vec<f64>> = speakers
        .iter()
        .map(|s| centroid(groups[s].iter().map(|&i| set.embeddings[i].as_slice())))
        .collect::<Result<_, _>>()?;

    // silhouette terms need mean member-to-member distances
    let n = set.embeddings.len();
    let mut silhouette = vec![0.0f64; n];
    for (si, s) in speakers.iter().enumerate() {
        let members = &groups[s];
        for &i in members {
            if members.len() < 2 {
                silhouette[i] = 0.0; // singleton convention
                continue;
            }
            let a: f64 = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| l2(&set.embeddings[i], &set.embeddings[j]).unwrap())
                .sum::<f64>()
                / (members.len() - 1) as f64;
            let b = speakers
                .iter()
                .enumerate()
                .filter(|(oi, _)| *oi != si)
                .map(|(_, o)| {
                    let others = &groups[o];
                    others
                        .iter()
                        .map(|&j| l2(&set.embeddings[i], &set.embeddings[j]).unwrap())
                        .sum::<f64>()
                        / others.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            silhouette[i] = if denom > 0.0 { (b - a) / denom } else { 0.0 };
        }
    }

    let mut per_speaker = Vec::with_capacity(speakers.len());
    let mut iad_sum = 0.0f64;
    let mut oad_sum = 0.0f64;
    let mut msc_sum = 0.0f64;
    for (si, s) in speakers.iter().enumerate() {
        let members = &groups[s];
        let own = &centroids[si];
        let iad_s: f64 = members
            .iter()
            .map(|&i| l2(&set.embeddings[i], own).unwrap())
            .sum::<f64>()
            / members.len() as f64;
        let mut oad_acc = 0.0f64;
        let mut oad_count = 0usize;
        for (oi, other) in centroids.iter().enumerate() {
            if oi == si {
                continue;
            }
            for &i in members {
                oad_acc += l2(&set.embeddings[i], other).unwrap();
                oad_count += 1;
            }
        }
        let oad_s = oad_acc / oad_count as f64;
        let msc_s: f64 =
            members.iter().map(|&i| silhouette[i]).sum::<f64>() / members.len() as f64;
        iad_sum += iad_s;
        oad_sum += oad_s;
        msc_sum += members.iter().map(|&i| silhouette[i]).sum::<f64>();
        per_speaker.push(SpeakerQuality {
            speaker_id: s.to_string(),
            n_embeddings: members.len(),
            iad: iad_s,
            oad: oad_s,
            mean_silhouette: msc_s,
        });
    }

    let iad = iad_sum / speakers.len() as f64;
    let oad = oad_sum / speakers.len() as f64;
    if oad == 0.0 {
        return Err(QualityError::ZeroOad);
    }
    Ok(QualityReport {
        iad,
        oad,
        dr: iad / oad,
        msc: msc_sum / n as f64,
        n_speakers: speakers.len(),
        n_embeddings: n,
        per_speaker,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_of(points: &[(&str, [f64; 2])]) -> LabeledEmbeddingSet {
        LabeledEmbeddingSet::new(
            points.iter().map(|(_, p)| p.to_vec()).collect(),
            points.iter().map(|(l, _)| l.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn centroid_of_single_vector_is_itself() {
        let v = vec![1.0, 2.0, 3.0];
        assert_eq!(centroid([v.as_slice()]).unwrap(), v);
    }

    #[test]
    fn centroid_of_pair() {
        let a = vec![0.0, 0.0];
        let b = vec![2.0, 0.0];
        assert_eq!(centroid([a.as_slice(), b.as_slice()]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn centroid_matches_high_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..32).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let got = centroid(rows.iter().map(|r| r.as_slice())).unwrap();
        // oracle: Kahan-compensated per-coordinate mean
        for d in 0..32 {
            let (mut sum, mut c) = (0.0f64, 0.0f64);
            for r in &rows {
                let term = r[d] - c;
                let t = sum + term;
                c = (t - sum) - term;
                sum = t;
            }
            let want = sum / rows.len() as f64;
            assert!((got[d] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn centroid_of_empty_set_fails() {
        assert!(matches!(
            centroid(std::iter::empty::<&[f64]>()),
            Err(QualityError::EmptySet)
        ));
    }

    #[test]
    fn hand_geometry_two_speakers() {
        // speakers at centroids (0,0) and (10,0), samples at +-1 around each
        let set = set_of(&[
            ("a", [-1.0, 0.0]),
            ("a", [1.0, 0.0]),
            ("b", [9.0, 0.0]),
            ("b", [11.0, 0.0]),
        ]);
        let report = compute_quality(&set).unwrap();
        assert!((report.iad - 1.0).abs() < 1e-12);
        assert!((report.oad - 10.0).abs() < 1e-12); // mean of {9, 11, 11, 9}
        assert!((report.dr - 0.1).abs() < 1e-12);
    }

    /// Two 1-D speakers with per-speaker spread `r` around centroids `c`
    /// apart give IAD = r and OAD = c exactly; handy for checking reported
    /// metric triples.
    pub(crate) fn two_speaker_set(r: f64, c: f64) -> LabeledEmbeddingSet {
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
    fn reference_triples_reproduce_their_ratio() {
        // consistency spot checks: printed (iad, oad) pairs against their
        // printed ratio, tolerance 5e-4
        for (iad, oad, dr) in [(4.77, 27.61, 0.1730), (3.21, 22.17, 0.1445), (4.46, 28.68, 0.1555)]
        {
            let report = compute_quality(&two_speaker_set(iad, oad)).unwrap();
            assert!((report.iad - iad).abs() < 1e-9);
            assert!((report.oad - oad).abs() < 1e-9);
            assert!(
                (report.dr - dr).abs() < 5e-4,
                "dr {} vs printed {dr}",
                report.dr
            );
        }
    }

    /// Brute-force silhouette straight from the definition.
    fn silhouette_oracle(set: &LabeledEmbeddingSet) -> f64 {
        let n = set.embeddings.len();
        let labels: Vec<&str> = set.labels.iter().map(String::as_str).collect();
        let uniq: std::collections::BTreeSet<&str> = labels.iter().copied().collect();
        let mut total = 0.0;
        for i in 0..n {
            let own: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
            if own.len() == 1 {
                continue; // s(i) = 0
            }
            let a = own
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| l2(&set.embeddings[i], &set.embeddings[j]).unwrap())
                .sum::<f64>()
                / (own.len() - 1) as f64;
            let mut b = f64::INFINITY;
            for &other in &uniq {
                if other == labels[i] {
                    continue;
                }
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == other).collect();
                let mean = members
                    .iter()
                    .map(|&j| l2(&set.embeddings[i], &set.embeddings[j]).unwrap())
                    .sum::<f64>()
                    / members.len() as f64;
                b = b.min(mean);
            }
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn msc_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut embeddings = Vec::new();
            let mut labels = Vec::new();
            for cluster in 0..3 {
                let center: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
                for _ in 0..10 {
                    embeddings.push(
                        center
                            .iter()
                            .map(|c| c + rng.gen_range(-2.0..2.0))
                            .collect::<Vec<f64>>(),
                    );
                    labels.push(format!("c{cluster}"));
                }
            }
            let set = LabeledEmbeddingSet::new(embeddings, labels).unwrap();
            let report = compute_quality(&set).unwrap();
            let want = silhouette_oracle(&set);
            assert!(
                (report.msc - want).abs() < 1e-9,
                "{} vs {want}",
                report.msc
            );
        }
    }

    #[test]
    fn msc_near_one_for_tight_far_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        for (cluster, center) in [0.0f64, 1000.0].iter().enumerate() {
            for _ in 0..8 {
                embeddings.push(vec![center + rng.gen_range(-1e-3..1e-3), 0.0]);
                labels.push(format!("c{cluster}"));
            }
        }
        let set = LabeledEmbeddingSet::new(embeddings, labels).unwrap();
        let report = compute_quality(&set).unwrap();
        assert!(report.msc > 0.99, "msc {}", report.msc);
        assert!(report.msc <= 1.0);
    }

    #[test]
    fn dr_and_msc_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        for cluster in 0..4 {
            for _ in 0..6 {
                embeddings.push(
                    (0..8)
                        .map(|d| cluster as f64 * 5.0 + d as f64 + rng.gen_range(-1.0..1.0))
                        .collect::<Vec<f64>>(),
                );
                labels.push(format!("s{cluster}"));
            }
        }
        let set = LabeledEmbeddingSet::new(embeddings, labels).unwrap();
        let base = compute_quality(&set).unwrap();
        let scaled = compute_quality(&set.scaled(3.7)).unwrap();
        assert!((base.dr - scaled.dr).abs() < 1e-9);
        assert!((base.msc - scaled.msc).abs() < 1e-9);
        assert!((scaled.iad - 3.7 * base.iad).abs() < 1e-9 * base.iad.max(1.0));
        assert!((scaled.oad - 3.7 * base.oad).abs() < 1e-9 * base.oad.max(1.0));
    }

    #[test]
    fn report_is_permutation_invariant() {
        let set = set_of(&[
            ("a", [0.0, 1.0]),
            ("b", [5.0, 2.0]),
            ("a", [0.5, 0.8]),
            ("b", [5.5, 1.2]),
            ("c", [-4.0, 3.0]),
            ("c", [-4.5, 2.0]),
        ]);
        let base = compute_quality(&set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..set.embeddings.len()).collect();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let permuted = LabeledEmbeddingSet::new(
                order.iter().map(|&i| set.embeddings[i].clone()).collect(),
                order.iter().map(|&i| set.labels[i].clone()).collect(),
            )
            .unwrap();
            let report = compute_quality(&permuted).unwrap();
            assert!((report.iad - base.iad).abs() < 1e-12);
            assert!((report.oad - base.oad).abs() < 1e-12);
            assert!((report.msc - base.msc).abs() < 1e-12);
        }
    }

    #[test]
    fn dr_is_iad_over_oad() {
        let set = set_of(&[
            ("a", [0.0, 0.0]),
            ("a", [2.0, 0.0]),
            ("b", [7.0, 3.0]),
            ("b", [9.0, 3.0]),
        ]);
        let report = compute_quality(&set).unwrap();
        assert_eq!(report.dr, report.iad / report.oad);
    }

    #[test]
    fn single_speaker_is_rejected() {
        let set = set_of(&[("a", [0.0, 0.0]), ("a", [1.0, 0.0])]);
        assert!(matches!(
            compute_quality(&set),
            Err(QualityError::SingleSpeaker)
        ));
    }

    #[test]
    fn coincident_speakers_yield_zero_oad_error() {
        let set = set_of(&[
            ("a", [1.0, 1.0]),
            ("a", [1.0, 1.0]),
            ("b", [1.0, 1.0]),
            ("b", [1.0, 1.0]),
        ]);
        assert!(matches!(compute_quality(&set), Err(QualityError::ZeroOad)));
    }

    #[test]
    fn msc_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let mut embeddings = Vec::new();
            let mut labels = Vec::new();
            for cluster in 0..3 {
                for _ in 0..rng.gen_range(1..6usize) {
                    embeddings.push(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                    labels.push(format!("s{cluster}"));
                }
            }
            if labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
                continue;
            }
            let set = LabeledEmbeddingSet::new(embeddings, labels).unwrap();
            if let Ok(report) = compute_quality(&set) {
                assert!(report.msc >= -1.0 && report.msc <= 1.0);
            }
        }
    }
}
