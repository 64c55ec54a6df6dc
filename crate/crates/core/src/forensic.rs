//! Forensic case construction (genuine/impostor protocol) and the two
//! likelihood-ratio approximations over embedding distances.
//!
//! A case compares a questioned recording against a reference speaker whose
//! identity is certain, in the context of a population of other speakers:
//! the distance-based score `lr_d = D(q, r) / N` ignores the population
//! (lower favors the same-speaker hypothesis) while the distance-ratio score
//! `lr_dr = min_p D(q, p) / D(r, q)` divides by the nearest population
//! centroid (higher favors the same-speaker hypothesis).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quality::centroid;
use crate::triplet::l2;

#[derive(Debug, Error)]
pub enum ForensicError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("insufficient population: need {need} eligible speakers besides reference and questioned, have {have}")]
    InsufficientPopulation { need: usize, have: usize },
    #[error("calibration needs at least two speakers")]
    SingleSpeaker,
    #[error("degenerate calibration: all speaker centroids coincide")]
    DegenerateCalibration,
    #[error("calibration constant must be positive, got {0}")]
    BadCalibration(f64),
    #[error("case has no {0} samples")]
    EmptySampleSet(&'static str),
    #[error("no embeddings for speaker '{speaker}' recording '{recording}'")]
    MissingRecording { speaker: String, recording: String },
    #[error(transparent)]
    Quality(#[from] crate::quality::QualityError),
    #[error(transparent)]
    Distance(#[from] crate::triplet::TripletError),
}

/// Distance cap standing in for +infinity when reference and questioned
/// centroids coincide.
pub const DEGENERATE_LR_DR_CAP: f64 = 1e12;

/// Threshold below which `D(r, q)` is treated as degenerate.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Genuine,
    Impostor,
}

impl std::fmt::Display for Truth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Truth::Genuine => "genuine",
            Truth::Impostor => "impostor",
        })
    }
}

/// Normalizing constant for `lr_d`, with a record of how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConstant {
    pub n: f64,
    pub provenance: String,
}

/// One population speaker's sample set.
#[derive(Debug, Clone)]
pub struct PopulationSet {
    pub speaker_id: String,
    pub samples: Vec<Vec<f64>>,
}

/// A scoring-ready case: embedding sample sets for the reference speaker,
/// the questioned recording, and the population. The truth label is carried
/// for evaluation only and never consulted by the scores.
#[derive(Debug, Clone)]
pub struct ForensicCase {
    pub case_id: String,
    pub truth: Truth,
    pub reference_speaker: String,
    pub questioned_speaker: String,
    pub reference: Vec<Vec<f64>>,
    pub questioned: Vec<Vec<f64>>,
    pub population: Vec<PopulationSet>,
}

/// Normalized questioned-reference centroid distance. Lower values favor
/// the same-speaker hypothesis. Never consults the population.
pub fn lr_d(case: &ForensicCase, cal: &CalibrationConstant) -> Result<f64, ForensicError> {
    if !(cal.n > 0.0) {
        return Err(ForensicError::BadCalibration(cal.n));
    }
    if case.reference.is_empty() {
        return Err(ForensicError::EmptySampleSet("reference"));
    }
    if case.questioned.is_empty() {
        return Err(ForensicError::EmptySampleSet("questioned"));
    }
    let r = centroid(case.reference.iter().map(|v| v.as_slice()))?;
    let q = centroid(case.questioned.iter().map(|v| v.as_slice()))?;
    Ok(l2(&q, &r)? / cal.n)
}

/// Nearest-population-centroid distance over the questioned-reference
/// distance. Higher values favor the same-speaker hypothesis. Returns the
/// score and a degeneracy flag; coincident reference and questioned
/// centroids yield the capped sentinel with the flag set.
pub fn lr_dr(case: &ForensicCase) -> Result<(f64, bool), ForensicError> {
    if case.population.is_empty() {
        return Err(ForensicError::EmptyPopulation);
    }
    if case.reference.is_empty() {
        return Err(ForensicError::EmptySampleSet("reference"));
    }
    if case.questioned.is_empty() {
        return Err(ForensicError::EmptySampleSet("questioned"));
    }
    let r = centroid(case.reference.iter().map(|v| v.as_slice()))?;
    let q = centroid(case.questioned.iter().map(|v| v.as_slice()))?;
    let mut min_pop = f64::INFINITY;
    for p in &case.population {
        let pc = centroid(p.samples.iter().map(|v| v.as_slice()))?;
        min_pop = min_pop.min(l2(&q, &pc)?);
    }
    let d_rq = l2(&r, &q)?;
    if d_rq < DEGENERATE_DISTANCE {
        return Ok((DEGENERATE_LR_DR_CAP, true));
    }
    Ok((min_pop / d_rq, false))
}

/// Calibrate the `lr_d` normalizer as the 99th percentile (linear
/// interpolation) of all inter-speaker centroid distances on a training
/// embedding set.
pub fn calibrate_n(
    set: &crate::quality::LabeledEmbeddingSet,
) -> Result<CalibrationConstant, ForensicError> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in set.labels.iter().enumerate() {
        by_speaker.entry(l.as_str()).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(ForensicError::SingleSpeaker);
    }
    let centroids: Vec<Vec<f64>> = by_speaker
        .values()
        .map(|idx| centroid(idx.iter().map(|&i| set.embeddings[i].as_slice())))
        .collect::<Result<_, _>>()?;

    let mut distances = Vec::with_capacity(centroids.len() * (centroids.len() - 1) / 2);
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            distances.push(l2(&centroids[i], &centroids[j])?);
        }
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = percentile_interpolated(&distances, 0.99);
    if n < DEGENERATE_DISTANCE {
        return Err(ForensicError::DegenerateCalibration);
    }
    Ok(CalibrationConstant {
        n,
        provenance: format!(
            "p99 of {} inter-speaker centroid distances over {} speakers",
            distances.len(),
            by_speaker.len()
        ),
    })
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile_interpolated(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Case-construction parameters. Defaults follow the evaluation protocol:
/// three reference recordings of 15 patches each (45 reference samples), a
/// fourth recording questioned, and a population of 100 speakers with 45
/// samples each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseConfig {
    pub reference_recordings: usize,
    pub patches_per_recording: usize,
    pub population_size: usize,
    /// How many genuine + impostor case pairs to build per eligible speaker.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for CaseConfig {
    fn default() -> Self {
        CaseConfig {
            reference_recordings: 3,
            patches_per_recording: 15,
            population_size: 100,
            rounds: 1,
            seed: 0,
        }
    }
}

impl CaseConfig {
    pub fn samples_per_set(&self) -> usize {
        self.reference_recordings * self.patches_per_recording
    }
}

/// Roster entry describing one case by recording identifiers only; the
/// embeddings are bound later, when scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: String,
    pub truth: Truth,
    pub reference_speaker: String,
    pub reference_recordings: Vec<String>,
    pub questioned_speaker: String,
    pub questioned_recording: String,
    /// per population speaker: (speaker, recordings providing its samples)
    pub population: Vec<(String, Vec<String>)>,
}

/// What `build_cases` skipped and why; construction is never silent.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CaseBuildReport {
    pub eligible_speakers: usize,
    /// speakers lacking a questioned (4th) recording
    pub skipped_speakers: Vec<String>,
}

/// Build the genuine/impostor case roster over an evaluation split.
///
/// Per eligible speaker (one with `reference_recordings + 1` recordings) and
/// per round: one genuine case (three shuffled recordings as reference, the
/// next as questioned) and one impostor case (same reference, questioned
/// drawn from a different speaker outside the population). The population is
/// drawn per case from speakers that can provide the full sample count,
/// excluding the reference and questioned speakers. Deterministic per seed.
pub fn build_cases(
    recordings_by_speaker: &BTreeMap<String, Vec<String>>,
    cfg: &CaseConfig,
) -> Result<(Vec<CaseSpec>, CaseBuildReport), ForensicError> {
    let mut report = CaseBuildReport::default();
    let speakers: Vec<&String> = recordings_by_speaker.keys().collect();

    // a population speaker must supply samples_per_set patches
    let pop_eligible: Vec<&String> = speakers
        .iter()
        .copied()
        .filter(|s| {
            let recs = &recordings_by_speaker[*s];
            recs.len() * cfg.patches_per_recording >= cfg.samples_per_set()
        })
        .collect();

    let mut cases = Vec::new();
    for round in 0..cfg.rounds {
        for speaker in &speakers {
            let recs = &recordings_by_speaker[*speaker];
            if recs.len() < cfg.reference_recordings + 1 {
                if round == 0 {
                    report.skipped_speakers.push((*speaker).clone());
                }
                continue;
            }
            if round == 0 {
                report.eligible_speakers += 1;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed(cfg.seed, speaker, round));

            let mut shuffled = recs.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let reference: Vec<String> = shuffled[..cfg.reference_recordings].to_vec();
            let genuine_questioned = shuffled[cfg.reference_recordings].clone();

            // impostor questioned speaker, then populations excluding both
            let impostor_pool: Vec<&String> = speakers
                .iter()
                .copied()
                .filter(|s| *s != *speaker && !recordings_by_speaker[*s].is_empty())
                .collect();
            if impostor_pool.is_empty() {
                return Err(ForensicError::InsufficientPopulation {
                    need: 1,
                    have: 0,
                });
            }
            let imp_speaker = impostor_pool[rng.gen_range(0..impostor_pool.len())];
            let imp_recs = &recordings_by_speaker[imp_speaker];
            let imp_questioned = imp_recs[rng.gen_range(0..imp_recs.len())].clone();

            let genuine_pop = draw_population(
                &pop_eligible,
                &[speaker.as_str()],
                cfg,
                recordings_by_speaker,
                &mut rng,
            )?;
            let impostor_pop = draw_population(
                &pop_eligible,
                &[speaker.as_str(), imp_speaker.as_str()],
                cfg,
                recordings_by_speaker,
                &mut rng,
            )?;

            let round_tag = if cfg.rounds > 1 {
                format!("-r{round}")
            } else {
                String::new()
            };
            cases.push(CaseSpec {
                case_id: format!("gen-{speaker}{round_tag}"),
                truth: Truth::Genuine,
                reference_speaker: (*speaker).clone(),
                reference_recordings: reference.clone(),
                questioned_speaker: (*speaker).clone(),
                questioned_recording: genuine_questioned,
                population: genuine_pop,
            });
            cases.push(CaseSpec {
                case_id: format!("imp-{speaker}{round_tag}"),
                truth: Truth::Impostor,
                reference_speaker: (*speaker).clone(),
                reference_recordings: reference,
                questioned_speaker: imp_speaker.clone(),
                questioned_recording: imp_questioned,
                population: impostor_pop,
            });
        }
    }
    Ok((cases, report))
}

fn case_seed(seed: u64, speaker: &str, round: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in speaker.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn draw_population(
    pop_eligible: &[&String],
    exclude: &[&str],
    cfg: &CaseConfig,
    recordings_by_speaker: &BTreeMap<String, Vec<String>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, Vec<String>)>, ForensicError> {
    let mut candidates: Vec<&String> = pop_eligible
        .iter()
        .copied()
        .filter(|s| !exclude.contains(&s.as_str()))
        .collect();
    if candidates.len() < cfg.population_size {
        return Err(ForensicError::InsufficientPopulation {
            need: cfg.population_size,
            have: candidates.len(),
        });
    }
    for i in 0..cfg.population_size {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    let mut population = Vec::with_capacity(cfg.population_size);
    for s in &candidates[..cfg.population_size] {
        // enough shuffled recordings to cover the sample budget
        let mut recs = recordings_by_speaker[*s].clone();
        for i in (1..recs.len()).rev() {
            let j = rng.gen_range(0..=i);
            recs.swap(i, j);
        }
        let mut needed = cfg.samples_per_set();
        let mut chosen = Vec::new();
        for r in recs {
            if needed == 0 {
                break;
            }
            chosen.push(r);
            needed = needed.saturating_sub(cfg.patches_per_recording);
        }
        population.push(((*s).clone(), chosen));
    }
    Ok(population)
}

/// Recording-id indexed embedding store used to bind a [`CaseSpec`] to data.
pub type EmbeddingStore = BTreeMap<(String, String), Vec<Vec<f64>>>;

/// Assemble a scoring-ready case from a roster entry, truncating each
/// population sample set to exactly the configured sample count.
pub fn assemble_case(
    spec: &CaseSpec,
    store: &EmbeddingStore,
    cfg: &CaseConfig,
) -> Result<ForensicCase, ForensicError> {
    let fetch = |speaker: &str, recording: &str| -> Result<&Vec<Vec<f64>>, ForensicError> {
        store
            .get(&(speaker.to_string(), recording.to_string()))
            .ok_or_else(|| ForensicError::MissingRecording {
                speaker: speaker.to_string(),
                recording: recording.to_string(),
            })
    };

    let mut reference = Vec::new();
    for r in &spec.reference_recordings {
        reference.extend(fetch(&spec.reference_speaker, r)?.iter().cloned());
    }
    let questioned = fetch(&spec.questioned_speaker, &spec.questioned_recording)?.clone();

    let mut population = Vec::new();
    for (s, recs) in &spec.population {
        let mut samples = Vec::new();
        for r in recs {
            samples.extend(fetch(s, r)?.iter().cloned());
        }
        samples.truncate(cfg.samples_per_set());
        population.push(PopulationSet {
            speaker_id: s.clone(),
            samples,
        });
    }

    Ok(ForensicCase {
        case_id: spec.case_id.clone(),
        truth: spec.truth,
        reference_speaker: spec.reference_speaker.clone(),
        questioned_speaker: spec.questioned_speaker.clone(),
        reference,
        questioned,
        population,
    })
}

/// Scores for one case, ready for CSV emission.
#[derive(Debug, Clone, Serialize)]
pub struct CaseScore {
    pub case_id: String,
    pub truth: Truth,
    pub lr_d: f64,
    pub lr_dr: f64,
    pub degenerate: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::LabeledEmbeddingSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case_with(
        reference: Vec<Vec<f64>>,
        questioned: Vec<Vec<f64>>,
        population: Vec<Vec<Vec<f64>>>,
    ) -> ForensicCase {
        ForensicCase {
            case_id: "t".into(),
            truth: Truth::Genuine,
            reference_speaker: "ref".into(),
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
        }
    }

    #[test]
    fn lr_d_zero_for_coincident_centroids() {
        let case = case_with(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, -1.0]],
            vec![],
        );
        let cal = CalibrationConstant {
            n: 10.0,
            provenance: "test".into(),
        };
        assert_eq!(lr_d(&case, &cal).unwrap(), 0.0);
    }

    #[test]
    fn lr_d_divides_by_n() {
        let case = case_with(vec![vec![0.0, 0.0]], vec![vec![5.0, 0.0]], vec![]);
        let cal = CalibrationConstant {
            n: 10.0,
            provenance: "test".into(),
        };
        assert!((lr_d(&case, &cal).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lr_d_ignores_population() {
        let reference = vec![vec![0.0, 0.0]];
        let questioned = vec![vec![3.0, 4.0]];
        let cal = CalibrationConstant {
            n: 2.0,
            provenance: "test".into(),
        };
        let sparse = case_with(reference.clone(), questioned.clone(), vec![]);
        let dense = case_with(
            reference,
            questioned,
            vec![vec![vec![100.0, 0.0]], vec![vec![0.008, 0.4]]],
        );
        assert_eq!(lr_d(&sparse, &cal).unwrap(), lr_d(&dense, &cal).unwrap());
    }

    #[test]
    fn lr_dr_hand_geometry() {
        // q = (0,0), r = (1,0), population centroids (5,0) and (0,3)
        let case = case_with(
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 0.0]],
            vec![vec![vec![5.0, 0.0]], vec![vec![0.0, 3.0]]],
        );
        let (score, degenerate) = lr_dr(&case).unwrap();
        assert!(!degenerate);
        assert!((score - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lr_dr_equidistant_is_one() {
        let case = case_with(
            vec![vec![2.0, 0.0]],
            vec![vec![0.0, 0.0]],
            vec![vec![vec![0.0, 2.0]]],
        );
        let (score, _) = lr_dr(&case).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lr_dr_caps_degenerate_distance() {
        let case = case_with(
            vec![vec![1.0, 1.0]],
            vec![vec![1.0, 1.0]],
            vec![vec![vec![5.0, 5.0]]],
        );
        let (score, degenerate) = lr_dr(&case).unwrap();
        assert!(degenerate);
        assert_eq!(score, DEGENERATE_LR_DR_CAP);
    }

    #[test]
    fn lr_dr_needs_population() {
        let case = case_with(vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0]], vec![]);
        assert!(matches!(lr_dr(&case), Err(ForensicError::EmptyPopulation)));
    }

    #[test]
    fn lr_dr_matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let dim = 6;
            let mut rand_set = |k: usize| -> Vec<Vec<f64>> {
                (0..k)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect())
                    .collect()
            };
            let reference = rand_set(5);
            let questioned = rand_set(4);
            let population: Vec<Vec<Vec<f64>>> = (0..7).map(|_| rand_set(3)).collect();
            let case = case_with(reference.clone(), questioned.clone(), population.clone());
            let (got, _) = lr_dr(&case).unwrap();

            // brute force: everything with explicit loops
            let mean = |rows: &Vec<Vec<f64>>| -> Vec<f64> {
                let mut m = vec![0.0; dim];
                for r in rows {
                    for (i, v) in r.iter().enumerate() {
                        m[i] += v;
                    }
                }
                m.iter().map(|v| v / rows.len() as f64).collect()
            };
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            let q = mean(&questioned);
            let r = mean(&reference);
            let min_pop = population
                .iter()
                .map(|p| dist(&q, &mean(p)))
                .fold(f64::INFINITY, f64::min);
            let want = min_pop / dist(&r, &q);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn lr_dr_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = 5;
        let mut rand_set = |k: usize| -> Vec<Vec<f64>> {
            (0..k)
                .map(|_| (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect()
        };
        let case = case_with(rand_set(5), rand_set(4), vec![rand_set(3), rand_set(3)]);
        let (base, _) = lr_dr(&case).unwrap();
        let scale = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|v| v * 3.7).collect())
                .collect()
        };
        let scaled = case_with(
            scale(&case.reference),
            scale(&case.questioned),
            case.population.iter().map(|p| scale(&p.samples)).collect(),
        );
        let (after, _) = lr_dr(&scaled).unwrap();
        assert!((base - after).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn calibration_of_two_speakers_is_their_distance() {
        let set = LabeledEmbeddingSet::new(
            vec![vec![0.0, 0.0], vec![10.0, 0.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let cal = calibrate_n(&set).unwrap();
        assert!((cal.n - 10.0).abs() < 1e-12);
        assert!(cal.provenance.contains("p99"));
    }

    #[test]
    fn calibration_rejects_single_speaker() {
        let set = LabeledEmbeddingSet::new(
            vec![vec![0.0], vec![1.0]],
            vec!["a".into(), "a".into()],
        )
        .unwrap();
        assert!(matches!(
            calibrate_n(&set),
            Err(ForensicError::SingleSpeaker)
        ));
    }

    #[test]
    fn calibration_rejects_coincident_centroids() {
        let set = LabeledEmbeddingSet::new(
            vec![vec![1.0, 2.0], vec![1.0, 2.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(matches!(
            calibrate_n(&set),
            Err(ForensicError::DegenerateCalibration)
        ));
    }

    #[test]
    fn calibration_matches_sort_and_interpolate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 4;
        // 10 speakers, one embedding each: centroids are the points
        let points: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let set = LabeledEmbeddingSet::new(
            points.clone(),
            (0..10).map(|i| format!("s{i}")).collect(),
        )
        .unwrap();
        let got = calibrate_n(&set).unwrap().n;

        let mut dists = Vec::new();
        for i in 0..10 {
            for j in (i + 1)..10 {
                dists.push(
                    points[i]
                        .iter()
                        .zip(&points[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt(),
                );
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(dists.len(), 45);
        let rank: f64 = 0.99 * 44.0;
        let lo = rank.floor() as usize;
        let frac = rank - lo as f64;
        let want = dists[lo] * (1.0 - frac) + dists[lo + 1] * frac;
        assert!((got - want).abs() < 1e-9);
    }

    fn synthetic_roster_input(
        speakers: usize,
        recordings: usize,
    ) -> BTreeMap<String, Vec<String>> {
        (0..speakers)
            .map(|s| {
                (
                    format!("spk{s:03}"),
                    (0..recordings).map(|r| format!("spk{s:03}-rec{r}")).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn roster_counts_match_protocol() {
        let recs = synthetic_roster_input(108, 4);
        let cfg = CaseConfig {
            population_size: 100,
            ..CaseConfig::default()
        };
        let (cases, report) = build_cases(&recs, &cfg).unwrap();
        assert_eq!(report.eligible_speakers, 108);
        assert!(report.skipped_speakers.is_empty());
        assert_eq!(cases.len(), 216);
        assert_eq!(
            cases.iter().filter(|c| c.truth == Truth::Genuine).count(),
            108
        );
        for c in &cases {
            assert_eq!(c.reference_recordings.len(), 3);
            assert_eq!(c.population.len(), 100);
            assert!(c
                .population
                .iter()
                .all(|(s, _)| s != &c.reference_speaker && s != &c.questioned_speaker));
            if c.truth == Truth::Impostor {
                assert_ne!(c.questioned_speaker, c.reference_speaker);
            } else {
                assert_eq!(c.questioned_speaker, c.reference_speaker);
                assert!(!c.reference_recordings.contains(&c.questioned_recording));
            }
        }
    }

    #[test]
    fn too_small_population_pool_is_rejected() {
        // 100 speakers total: a genuine case needs 100 other speakers
        let recs = synthetic_roster_input(100, 4);
        let cfg = CaseConfig {
            population_size: 100,
            ..CaseConfig::default()
        };
        assert!(matches!(
            build_cases(&recs, &cfg),
            Err(ForensicError::InsufficientPopulation { .. })
        ));
    }

    #[test]
    fn speakers_without_fourth_recording_are_reported() {
        let mut recs = synthetic_roster_input(105, 4);
        recs.insert("short".into(), vec!["short-rec0".into(), "short-rec1".into(), "short-rec2".into()]);
        let cfg = CaseConfig {
            population_size: 100,
            ..CaseConfig::default()
        };
        let (cases, report) = build_cases(&recs, &cfg).unwrap();
        assert_eq!(report.skipped_speakers, vec!["short".to_string()]);
        assert_eq!(report.eligible_speakers, 105);
        assert_eq!(cases.len(), 210);
    }

    #[test]
    fn roster_is_deterministic_per_seed() {
        let recs = synthetic_roster_input(110, 4);
        let cfg = CaseConfig {
            population_size: 100,
            seed: 9,
            ..CaseConfig::default()
        };
        let (a, _) = build_cases(&recs, &cfg).unwrap();
        let (b, _) = build_cases(&recs, &cfg).unwrap();
        let render = |cases: &[CaseSpec]| serde_json::to_string(cases).unwrap();
        assert_eq!(render(&a), render(&b));
    }

    #[test]
    fn rounds_multiply_case_counts() {
        let recs = synthetic_roster_input(10, 5);
        let cfg = CaseConfig {
            population_size: 5,
            rounds: 3,
            seed: 2,
            ..CaseConfig::default()
        };
        let (cases, _) = build_cases(&recs, &cfg).unwrap();
        assert_eq!(cases.len(), 10 * 2 * 3);
        // distinct ids
        let ids: std::collections::BTreeSet<&str> =
            cases.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids.len(), cases.len());
    }
}
