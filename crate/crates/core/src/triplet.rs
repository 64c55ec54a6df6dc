//! Triplet loss over L2 distances, in-batch triplet mining, and the
//! training loop that stitches batches, the network, and the optimizer
//! together.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::net::{Network, OptimizerState};

#[derive(Debug, Error)]
pub enum TripletError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("patch stream problem: {0}")]
    BadStream(String),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// Indices into a batch: anchor and positive share a speaker, the negative
/// does not, and anchor != positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    Random,
    SemiHard,
}

/// Step or wall-clock training budget. Step budgets are the reproducible
/// default; wall-clock budgets exist because training time is often stated
/// in days rather than steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainBudget {
    Steps(u64),
    Seconds(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Hinge margin; 2 by default.
    pub margin: f64,
    pub speakers_per_batch: usize,
    pub patches_per_speaker: usize,
    pub budget: TrainBudget,
    pub mining: MiningStrategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 2.0,
            speakers_per_batch: 8,
            patches_per_speaker: 4,
            budget: TrainBudget::Steps(500),
            mining: MiningStrategy::SemiHard,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TripletError> {
        if self.margin < 0.0 {
            return Err(TripletError::BadStream("margin must be >= 0".into()));
        }
        if self.speakers_per_batch < 2 || self.patches_per_speaker < 2 {
            return Err(TripletError::DegenerateBatch(
                "need at least 2 speakers per batch and 2 patches per speaker".into(),
            ));
        }
        Ok(())
    }
}

/// One training step's record for the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Fraction of mined triplets with a positive hinge.
    pub active_fraction: f64,
}

/// Euclidean distance, accumulated in f64.
pub fn l2(a: &[f64], b: &[f64]) -> Result<f64, TripletError> {
    if a.len() != b.len() {
        return Err(TripletError::DimensionMismatch(a.len(), b.len()));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Hinge loss `max(D(A,P) - D(A,N) + m, 0)` and its exact subgradients with
/// respect to the three embeddings. The gradient is zero when the hinge is
/// inactive; at the hinge boundary the active-side gradient is used, and a
/// zero distance contributes a zero direction.
#[allow(clippy::type_complexity)]
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>), TripletError> {
    let d_ap = l2(anchor, positive)?;
    let d_an = l2(anchor, negative)?;
    let dim = anchor.len();
    let z = d_ap - d_an + margin;
    if z < 0.0 {
        return Ok((0.0, vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]));
    }

    let mut ga = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    if d_ap > 0.0 {
        for i in 0..dim {
            let u = (anchor[i] - positive[i]) / d_ap;
            ga[i] += u;
            gp[i] -= u;
        }
    }
    if d_an > 0.0 {
        for i in 0..dim {
            let v = (anchor[i] - negative[i]) / d_an;
            ga[i] -= v;
            gn[i] += v;
        }
    }
    Ok((z.max(0.0), ga, gp, gn))
}

/// Mine triplets within a batch given labels and the pairwise distance
/// matrix (row-major, `n x n`).
///
/// `Random` emits every ordered same-label (anchor, positive) pair with one
/// uniformly drawn negative. `SemiHard` picks, per pair, the closest
/// negative inside the semi-hard window `D(A,P) < D(A,N) < D(A,P) + m`, and
/// the closest negative overall when the window is empty.
pub fn mine_triplets<R: Rng>(
    labels: &[usize],
    distances: &[f64],
    margin: f64,
    strategy: MiningStrategy,
    rng: &mut R,
) -> Result<Vec<Triplet>, TripletError> {
    let n = labels.len();
    if distances.len() != n * n {
        return Err(TripletError::DimensionMismatch(distances.len(), n * n));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(TripletError::DegenerateBatch(
            "a batch needs at least two speakers".into(),
        ));
    }
    if by_label.values().all(|v| v.len() < 2) {
        return Err(TripletError::DegenerateBatch(
            "every speaker in the batch is a singleton".into(),
        ));
    }

    let mut triplets = Vec::new();
    for (label, members) in &by_label {
        if members.len() < 2 {
            continue;
        }
        let negatives: Vec<usize> = (0..n).filter(|i| labels[*i] != *label).collect();
        for &a in members {
            for &p in members {
                if a == p {
                    continue;
                }
                let d_ap = distances[a * n + p];
                let negative = match strategy {
                    MiningStrategy::Random => negatives[rng.gen_range(0..negatives.len())],
                    MiningStrategy::SemiHard => {
                        let in_window = negatives
                            .iter()
                            .copied()
                            .filter(|&neg| {
                                let d_an = distances[a * n + neg];
                                d_ap < d_an && d_an < d_ap + margin
                            })
                            .min_by(|&x, &y| {
                                distances[a * n + x]
                                    .partial_cmp(&distances[a * n + y])
                                    .unwrap()
                            });
                        in_window.unwrap_or_else(|| {
                            negatives
                                .iter()
                                .copied()
                                .min_by(|&x, &y| {
                                    distances[a * n + x]
                                        .partial_cmp(&distances[a * n + y])
                                        .unwrap()
                                })
                                .unwrap()
                        })
                    }
                };
                triplets.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
    }
    Ok(triplets)
}

/// Labeled training patches grouped by speaker, all of one width.
#[derive(Debug, Clone)]
pub struct LabeledPatchSet {
    pub width: usize,
    pub speakers: Vec<String>,
    /// one entry per speaker, matching `speakers` order
    pub patches: Vec<Vec<Vec<f32>>>,
}

impl LabeledPatchSet {
    pub fn from_patches(
        patches: impl IntoIterator<Item = crate::spectrogram::SpectrogramPatch>,
    ) -> Result<Self, TripletError> {
        let mut width = None;
        let mut by_speaker: BTreeMap<String, Vec<Vec<f32>>> = BTreeMap::new();
        for p in patches {
            let speaker = p
                .speaker_id
                .clone()
                .ok_or_else(|| TripletError::BadStream("patch without a speaker label".into()))?;
            match width {
                None => width = Some(p.width),
                Some(w) if w != p.width => {
                    return Err(TripletError::BadStream(format!(
                        "mixed patch widths {w} and {}",
                        p.width
                    )))
                }
                _ => {}
            }
            by_speaker.entry(speaker).or_default().push(p.values);
        }
        let width = width.ok_or_else(|| TripletError::BadStream("empty patch stream".into()))?;
        let (speakers, patches) = by_speaker.into_iter().unzip();
        Ok(LabeledPatchSet {
            width,
            speakers,
            patches,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_patches(&self) -> usize {
        self.patches.iter().map(Vec::len).sum()
    }
}

fn mix(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run triplet training: repeat {assemble batch, forward, mine, loss,
/// backward, step} until the budget is exhausted. Deterministic for a step
/// budget and fixed seeds. Returns the trained network and per-step stats.
pub fn train(
    mut net: Network<f32>,
    set: &LabeledPatchSet,
    cfg: &TrainConfig,
) -> Result<(Network<f32>, Vec<StepStats>), TripletError> {
    cfg.validate()?;
    if set.n_speakers() < 2 {
        return Err(TripletError::DegenerateBatch(format!(
            "{} speakers in the stream",
            set.n_speakers()
        )));
    }
    if set.width != net.input_width() {
        return Err(TripletError::BadStream(format!(
            "patch width {} does not match network width {}",
            set.width,
            net.input_width()
        )));
    }

    let usable: Vec<usize> = (0..set.n_speakers())
        .filter(|&s| !set.patches[s].is_empty())
        .collect();
    if usable.len() < 2 {
        return Err(TripletError::DegenerateBatch(
            "fewer than two speakers have patches".into(),
        ));
    }

    let started = Instant::now();
    let mut trace = Vec::new();
    let mut opt_state = OptimizerState::new();
    let mut step = 0u64;
    loop {
        match cfg.budget {
            TrainBudget::Steps(n) => {
                if step >= n {
                    break;
                }
            }
            TrainBudget::Seconds(s) => {
                if started.elapsed().as_secs_f64() >= s {
                    break;
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step));
        let s_count = cfg.speakers_per_batch.min(usable.len());
        // distinct speakers via partial shuffle
        let mut pool = usable.clone();
        for i in 0..s_count {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let chosen = &pool[..s_count];

        let mut batch: Vec<&[f32]> = Vec::with_capacity(s_count * cfg.patches_per_speaker);
        let mut labels: Vec<usize> = Vec::with_capacity(s_count * cfg.patches_per_speaker);
        for &spk in chosen {
            let avail = &set.patches[spk];
            if avail.len() >= cfg.patches_per_speaker {
                let mut idx: Vec<usize> = (0..avail.len()).collect();
                for i in 0..cfg.patches_per_speaker {
                    let j = rng.gen_range(i..idx.len());
                    idx.swap(i, j);
                }
                for &i in &idx[..cfg.patches_per_speaker] {
                    batch.push(&avail[i]);
                    labels.push(spk);
                }
            } else {
                for _ in 0..cfg.patches_per_speaker {
                    let i = rng.gen_range(0..avail.len());
                    batch.push(&avail[i]);
                    labels.push(spk);
                }
            }
        }

        let (outputs, cache) = net.forward_training(&batch)?;
        let emb: Vec<Vec<f64>> = outputs
            .iter()
            .map(|o| o.iter().map(|&v| v as f64).collect())
            .collect();

        let n = emb.len();
        let mut distances = vec![0.0f64; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = l2(&emb[i], &emb[j])?;
                distances[i * n + j] = d;
                distances[j * n + i] = d;
            }
        }

        let triplets = mine_triplets(&labels, &distances, cfg.margin, cfg.mining, &mut rng)?;
        let mut upstream = vec![vec![0.0f64; crate::net::EMBEDDING_DIM]; n];
        let mut total_loss = 0.0f64;
        let mut active = 0usize;
        for t in &triplets {
            let (loss, ga, gp, gn) =
                triplet_loss(&emb[t.anchor], &emb[t.positive], &emb[t.negative], cfg.margin)?;
            total_loss += loss;
            if loss > 0.0 {
                active += 1;
            }
            for i in 0..ga.len() {
                upstream[t.anchor][i] += ga[i];
                upstream[t.positive][i] += gp[i];
                upstream[t.negative][i] += gn[i];
            }
        }
        let n_triplets = triplets.len().max(1) as f64;
        let mean_loss = total_loss / n_triplets;
        if !mean_loss.is_finite() {
            return Err(TripletError::NonFiniteLoss {
                step,
                detail: format!(
                    "mean loss {mean_loss} over {} triplets, batch of {} patches from {} speakers",
                    triplets.len(),
                    n,
                    s_count
                ),
            });
        }

        let upstream_f32: Vec<Vec<f32>> = upstream
            .iter()
            .map(|g| g.iter().map(|&v| (v / n_triplets) as f32).collect())
            .collect();
        let grads = net.backward(&cache, &upstream_f32)?;
        net.step(&grads, &mut opt_state)?;

        trace.push(StepStats {
            step,
            loss: mean_loss,
            active_fraction: active as f64 / n_triplets,
        });
        step += 1;
    }

    Ok((net, trace))
}

/// Write the loss trace as CSV with a config header comment.
pub fn write_trace_csv(
    trace: &[StepStats],
    header: &str,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(out, "# {header}")?;
    writeln!(out, "step,loss,active_fraction")?;
    for s in trace {
        writeln!(out, "{},{},{}", s.step, s.loss, s.active_fraction)?;
    }
    Ok(())
}
