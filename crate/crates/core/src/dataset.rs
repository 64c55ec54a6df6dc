//! Manifest-driven corpus handling: speaker metadata, speaker-disjoint
//! splits, subgroup filters, and a synthetic-speaker generator so the whole
//! pipeline can run without any real corpus on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("duplicate recording path '{path}' (line {line})")]
    DuplicatePath { line: usize, path: String },
    #[error("need at least 3 speakers to split, found {0}")]
    TooFewSpeakers(usize),
    #[error("split fractions must sum to 1, got {0}")]
    BadFractions(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Gender {
    F,
    M,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeGroup {
    Youth,
    Adult,
    Senior,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Native {
    Yes,
    No,
    Unknown,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
            Gender::Unknown => "unknown",
        })
    }
}

/// Per-recording metadata, one JSON object per manifest line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordingMeta {
    pub path: String,
    pub speaker_id: String,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub native: Native,
    pub dialect: String,
    pub duration_s: f64,
}

/// Raw line shape before enum normalization.
#[derive(Deserialize)]
struct RawRecord {
    path: String,
    speaker_id: String,
    #[serde(default)]
    gender: Option<String>,
    #[serde(default)]
    age_group: Option<String>,
    #[serde(default)]
    native: Option<String>,
    #[serde(default)]
    dialect: Option<String>,
    duration_s: f64,
}

fn fold_gender(raw: &str) -> (Gender, bool) {
    match raw.trim().to_ascii_lowercase().as_str() {
        "f" | "female" => (Gender::F, false),
        "m" | "male" => (Gender::M, false),
        "" | "unknown" => (Gender::Unknown, false),
        _ => (Gender::Unknown, true),
    }
}

fn fold_age(raw: &str) -> (AgeGroup, bool) {
    match raw.trim().to_ascii_lowercase().as_str() {
        "youth" => (AgeGroup::Youth, false),
        "adult" => (AgeGroup::Adult, false),
        "senior" => (AgeGroup::Senior, false),
        "" | "unknown" => (AgeGroup::Unknown, false),
        _ => (AgeGroup::Unknown, true),
    }
}

fn fold_native(raw: &str) -> (Native, bool) {
    match raw.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" => (Native::Yes, false),
        "no" | "n" | "false" => (Native::No, false),
        "" | "unknown" => (Native::Unknown, false),
        _ => (Native::Unknown, true),
    }
}

/// A loaded corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<RecordingMeta>,
    pub split_seed: u64,
}

impl Manifest {
    /// Distinct speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.speaker_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Record-preserving subset; the split seed is retained so split
    /// assignments computed before or after filtering agree.
    pub fn filter(&self, pred: impl Fn(&RecordingMeta) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| pred(r)).cloned().collect(),
            split_seed: self.split_seed,
        }
    }
}

/// Conjunctive metadata predicate, parsed from `key=value` CLI terms.
#[derive(Debug, Clone, Default)]
pub struct FilterSpec {
    pub gender: Option<Gender>,
    pub age_group: Option<AgeGroup>,
    pub native: Option<Native>,
    pub dialect: Option<String>,
}

impl FilterSpec {
    pub fn parse_term(&mut self, term: &str) -> Result<(), String> {
        let (key, value) = term
            .split_once('=')
            .ok_or_else(|| format!("filter term '{term}' is not key=value"))?;
        match key {
            "gender" => self.gender = Some(fold_gender(value).0),
            "age" | "age_group" => self.age_group = Some(fold_age(value).0),
            "native" => self.native = Some(fold_native(value).0),
            "dialect" => self.dialect = Some(value.trim().to_string()),
            _ => return Err(format!("unknown filter key '{key}'")),
        }
        Ok(())
    }

    pub fn matches(&self, rec: &RecordingMeta) -> bool {
        self.gender.map_or(true, |g| rec.gender == g)
            && self.age_group.map_or(true, |a| rec.age_group == a)
            && self.native.map_or(true, |n| rec.native == n)
            && self
                .dialect
                .as_deref()
                .map_or(true, |d| rec.dialect.eq_ignore_ascii_case(d))
    }
}

/// Parse a JSON-Lines manifest. Unrecognized enum values fold to `unknown`;
/// the returned count says how many such values were seen.
pub fn load_manifest(path: &Path) -> Result<(Manifest, usize), DatasetError> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text)
}

/// Parse manifest text: one JSON record per line, with blank lines and `#`
/// header/comment lines skipped.
pub fn parse_manifest(text: &str) -> Result<(Manifest, usize), DatasetError> {
    let mut records = Vec::new();
    let mut seen_paths: BTreeMap<String, usize> = BTreeMap::new();
    let mut warnings = 0usize;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| DatasetError::ParseError {
                line: line_no,
                msg: e.to_string(),
            })?;
        if raw.speaker_id.is_empty() {
            return Err(DatasetError::ParseError {
                line: line_no,
                msg: "empty speaker_id".into(),
            });
        }
        if !(raw.duration_s > 0.0) {
            return Err(DatasetError::ParseError {
                line: line_no,
                msg: format!("duration_s must be positive, got {}", raw.duration_s),
            });
        }
        if let Some(&first) = seen_paths.get(&raw.path) {
            let _ = first;
            return Err(DatasetError::DuplicatePath {
                line: line_no,
                path: raw.path,
            });
        }
        seen_paths.insert(raw.path.clone(), line_no);

        let (gender, w1) = fold_gender(raw.gender.as_deref().unwrap_or(""));
        let (age_group, w2) = fold_age(raw.age_group.as_deref().unwrap_or(""));
        let (native, w3) = fold_native(raw.native.as_deref().unwrap_or(""));
        warnings += usize::from(w1) + usize::from(w2) + usize::from(w3);

        records.push(RecordingMeta {
            path: raw.path,
            speaker_id: raw.speaker_id,
            gender,
            age_group,
            native,
            dialect: raw.dialect.unwrap_or_default(),
            duration_s: raw.duration_s,
        });
    }

    Ok((
        Manifest {
            records,
            split_seed: 0,
        },
        warnings,
    ))
}

/// Serialize a manifest back to JSON-Lines.
pub fn write_manifest(manifest: &Manifest, out: &mut impl std::io::Write) -> std::io::Result<()> {
    for rec in &manifest.records {
        serde_json::to_writer(&mut *out, rec)?;
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Deterministic speaker-disjoint split assignment.
///
/// Speakers are sorted, shuffled by `seed`, then partitioned: validation and
/// test take `floor(n * fraction)` speakers each and training keeps the
/// remainder, so evaluation splits never lose more than one speaker to
/// rounding.
pub fn split_speakers(
    manifest: &Manifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<BTreeMap<String, Split>, DatasetError> {
    let (f_train, f_val, f_test) = fractions;
    let sum = f_train + f_val + f_test;
    if (sum - 1.0).abs() > 1e-9 || f_train < 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(DatasetError::BadFractions(sum));
    }
    let mut speakers = manifest.speakers();
    if speakers.len() < 3 {
        return Err(DatasetError::TooFewSpeakers(speakers.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..speakers.len()).rev() {
        let j = rng.gen_range(0..=i);
        speakers.swap(i, j);
    }

    let n = speakers.len();
    let n_val = (n as f64 * f_val).floor() as usize;
    let n_test = (n as f64 * f_test).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut assignment = BTreeMap::new();
    for (i, speaker) in speakers.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
        assignment.insert(speaker, split);
    }
    Ok(assignment)
}

// --- synthetic speakers ----------------------------------------------------

/// Fundamental-frequency lattice: step 0.25 Hz over [90, 280), period 760.
/// Any two seeds within a 760-seed window map to distinct f0 values and
/// consecutive seeds always differ by at least 5 Hz.
pub fn synth_f0_hz(speaker_seed: u64) -> f64 {
    90.0 + 0.25 * ((speaker_seed.wrapping_mul(331)) % 760) as f64
}

fn mix_seeds(a: u64, b: u64) -> u64 {
    // splitmix-style avalanche over the pair
    let mut z = a ^ b.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SpeakerTimbre {
    f0_hz: f64,
    formants: [(f64, f64, f64); 3], // (center, bandwidth, gain)
    vibrato_rate_hz: f64,
}

fn speaker_timbre(speaker_seed: u64) -> SpeakerTimbre {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(speaker_seed, 0x5045_414b));
    let formants = [
        (
            rng.gen_range(350.0..900.0),
            rng.gen_range(100.0..180.0),
            rng.gen_range(0.7..1.0),
        ),
        (
            rng.gen_range(950.0..2400.0),
            rng.gen_range(120.0..220.0),
            rng.gen_range(0.6..1.0),
        ),
        (
            rng.gen_range(2500.0..3400.0),
            rng.gen_range(150.0..260.0),
            rng.gen_range(0.4..0.9),
        ),
    ];
    SpeakerTimbre {
        f0_hz: synth_f0_hz(speaker_seed),
        formants,
        vibrato_rate_hz: rng.gen_range(4.0..6.5),
    }
}

fn formant_gain(timbre: &SpeakerTimbre, freq: f64) -> f64 {
    let mut g = 0.1;
    for &(center, bw, gain) in &timbre.formants {
        let d = (freq - center) / bw;
        g += gain * (-0.5 * d * d).exp();
    }
    g
}

const SYNTH_RATE_HZ: u32 = 16_000;
const SNR_DB: f64 = 30.0;

/// Generate a deterministic synthetic "voice" recording.
///
/// `speaker_seed` fixes the timbre family (fundamental on the f0 lattice,
/// three formant-like resonances, vibrato rate); `utterance_seed` varies the
/// amplitude envelope, micro-jitter, harmonic phases, and the additive noise
/// (30 dB SNR). Calling twice with the same arguments is bit-identical.
pub fn synth_speaker_clip(speaker_seed: u64, utterance_seed: u64, duration_s: f64) -> AudioClip {
    assert!(
        duration_s >= 2.5,
        "synthetic utterances must be at least 2.5 s to admit 2000 ms patches"
    );
    let timbre = speaker_timbre(speaker_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(speaker_seed, utterance_seed));

    let n = (duration_s * SYNTH_RATE_HZ as f64).round() as usize;
    let dt = 1.0 / SYNTH_RATE_HZ as f64;

    // utterance-specific modulation
    let vib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let env = [
        (rng.gen_range(0.3..1.0), rng.gen_range(0.0..std::f64::consts::TAU)),
        (rng.gen_range(1.0..2.0), rng.gen_range(0.0..std::f64::consts::TAU)),
    ];
    let jitter_rate = rng.gen_range(2.0..3.5);
    let jitter_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let n_harmonics = ((5_000.0 / timbre.f0_hz).floor() as usize).max(1);
    let mut amps = Vec::with_capacity(n_harmonics);
    let mut phases = Vec::with_capacity(n_harmonics);
    for h in 1..=n_harmonics {
        let freq = h as f64 * timbre.f0_hz;
        let rolloff = 1.0 / (h as f64).powf(0.7);
        let emphasis = if h == 1 { 4.0 } else { 1.0 };
        amps.push(emphasis * rolloff * formant_gain(&timbre, freq));
        phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
    }

    let mut samples = Vec::with_capacity(n);
    let mut fund_phase = 0.0f64;
    let mut sum_sq = 0.0f64;
    for i in 0..n {
        let t = i as f64 * dt;
        let vibrato = 0.002 * (std::f64::consts::TAU * timbre.vibrato_rate_hz * t + vib_phase).sin();
        let jitter = 0.001 * (std::f64::consts::TAU * jitter_rate * t + jitter_phase).sin();
        let f_inst = timbre.f0_hz * (1.0 + vibrato + jitter);
        fund_phase += std::f64::consts::TAU * f_inst * dt;

        let envelope = 0.7
            + 0.15 * (std::f64::consts::TAU * env[0].0 * t + env[0].1).sin()
            + 0.15 * (std::f64::consts::TAU * env[1].0 * t + env[1].1).sin();

        let mut v = 0.0f64;
        for (h, (&a, &p)) in amps.iter().zip(phases.iter()).enumerate() {
            v += a * ((h + 1) as f64 * fund_phase + p).sin();
        }
        let s = envelope * v;
        sum_sq += s * s;
        samples.push(s);
    }

    // normalize to a fixed RMS, then add noise at the configured SNR
    let rms = (sum_sq / n as f64).sqrt().max(1e-12);
    let target_rms = 0.15;
    let gain = target_rms / rms;
    let noise_rms = target_rms / 10f64.powf(SNR_DB / 20.0);
    let mut peak = 0.0f64;
    for s in samples.iter_mut() {
        let noise: f64 = rng.gen_range(-1.0..1.0) * noise_rms * 1.732; // uniform, unit-variance scaled
        *s = *s * gain + noise;
        peak = peak.max(s.abs());
    }
    if peak > 0.97 {
        let squash = 0.97 / peak;
        for s in samples.iter_mut() {
            *s *= squash;
        }
    }

    AudioClip::new(
        samples.into_iter().map(|s| s as f32).collect(),
        SYNTH_RATE_HZ,
        format!("synth-s{speaker_seed}-u{utterance_seed}"),
    )
}
