//! Spectrogram patches: the network's raw input.
//!
//! A recording is turned into a full band matrix (one 256-band frame per hop)
//! and patches of `W = floor(t_ms / h_ms)` consecutive frames are cut out of
//! it, standardized to zero mean and unit variance per patch.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::AudioClip;

/// Fixed number of frequency bands per frame.
pub const N_BINS: usize = 256;

/// Default upper frequency bound in Hz; clamped to Nyquist at analysis time.
pub const DEFAULT_F_MAX_HZ: f64 = 8_500.0;

#[derive(Debug, Error)]
pub enum SpectrogramError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// The clip is shorter than one analysis window.
    #[error("clip too short: {len_ms} ms of audio, window is {w_ms} ms")]
    ClipTooShort { len_ms: u64, w_ms: u64 },
    /// A patch window does not fit at the requested start frame.
    #[error("patch out of range: start frame {start_frame} + width {width} > {n_frames} frames")]
    OutOfRange {
        start_frame: usize,
        width: usize,
        n_frames: usize,
    },
}

/// Analysis parameters: patch duration `t_ms`, window `w_ms`, hop `h_ms`,
/// all in milliseconds, plus the upper frequency bound.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrogramConfig {
    pub t_ms: u64,
    pub w_ms: u64,
    pub h_ms: u64,
    pub f_max_hz: f64,
}

impl SpectrogramConfig {
    pub fn new(t_ms: u64, w_ms: u64, h_ms: u64) -> Result<Self, SpectrogramError> {
        let cfg = Self {
            t_ms,
            w_ms,
            h_ms,
            f_max_hz: DEFAULT_F_MAX_HZ,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SpectrogramError> {
        if self.h_ms == 0 || self.h_ms > self.w_ms || self.w_ms > self.t_ms {
            return Err(SpectrogramError::InvalidConfig(format!(
                "need 0 < h ({}) <= w ({}) <= t ({})",
                self.h_ms, self.w_ms, self.t_ms
            )));
        }
        if !(self.f_max_hz > 0.0) {
            return Err(SpectrogramError::InvalidConfig(
                "f_max_hz must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patch width in frames.
    pub fn patch_width_frames(&self) -> usize {
        patch_width(self.t_ms, self.h_ms)
    }
}

/// Number of frames a `t_ms` patch spans at hop `h_ms`: `floor(t / h)`.
pub fn patch_width(t_ms: u64, h_ms: u64) -> usize {
    debug_assert!(h_ms > 0 && t_ms >= h_ms);
    (t_ms / h_ms) as usize
}

/// Full-recording band matrix: `n_frames` rows of [`N_BINS`] log-magnitude
/// band energies, time-major.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    data: Vec<f32>,
    n_frames: usize,
}

impl BandMatrix {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * N_BINS..(i + 1) * N_BINS]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// One standardized `W x 256` patch together with its provenance.
#[derive(Debug, Clone)]
pub struct SpectrogramPatch {
    /// Time-major values, `width * 256` entries, zero mean and unit variance
    /// (all zeros for a constant segment).
    pub values: Vec<f32>,
    pub width: usize,
    pub config: SpectrogramConfig,
    /// Offset of the patch within its recording, in milliseconds.
    pub start_ms: u64,
    pub source_id: String,
    pub speaker_id: Option<String>,
}

/// Short-time analysis of a whole recording.
///
/// Frames are taken every `h_ms` with a hann window of `w_ms`, zero-padded to
/// the next power of two for the transform. One-sided magnitudes are averaged
/// into 256 equal-width linear bands spanning `[0, min(f_max, Nyquist)]` and
/// compressed as `log(1 + magnitude)`.
pub fn stft_bands(
    clip: &AudioClip,
    config: &SpectrogramConfig,
) -> Result<BandMatrix, SpectrogramError> {
    config.validate()?;
    let rate = clip.sample_rate_hz as u64;
    let window_samples = (config.w_ms * rate / 1000) as usize;
    let hop_samples = (config.h_ms * rate / 1000) as usize;
    if window_samples == 0 || hop_samples == 0 {
        return Err(SpectrogramError::InvalidConfig(
            "window or hop rounds to zero samples".into(),
        ));
    }
    if clip.samples.len() < window_samples {
        return Err(SpectrogramError::ClipTooShort {
            len_ms: clip.samples.len() as u64 * 1000 / rate,
            w_ms: config.w_ms,
        });
    }

    let n_frames = (clip.samples.len() - window_samples) / hop_samples + 1;
    let n_fft = window_samples.next_power_of_two();
    let f_max = config.f_max_hz.min(clip.sample_rate_hz as f64 / 2.0);
    let hz_per_bin = clip.sample_rate_hz as f64 / n_fft as f64;

    // hann window, periodic form
    let window: Vec<f64> = (0..window_samples)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window_samples as f64).cos())
        .collect();

    // map each one-sided transform bin to its band index, once
    let mut bin_to_band = vec![usize::MAX; n_fft / 2 + 1];
    let mut band_counts = vec![0u32; N_BINS];
    for (k, slot) in bin_to_band.iter_mut().enumerate() {
        let freq = k as f64 * hz_per_bin;
        if freq <= f_max {
            let band = ((freq / f_max * N_BINS as f64) as usize).min(N_BINS - 1);
            *slot = band;
            band_counts[band] += 1;
        }
    }

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
    let mut data = Vec::with_capacity(n_frames * N_BINS);
    let mut band_sums = vec![0.0f64; N_BINS];

    for frame in 0..n_frames {
        let start = frame * hop_samples;
        for i in 0..n_fft {
            let x = if i < window_samples {
                clip.samples[start + i] as f64 * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);

        band_sums.iter_mut().for_each(|s| *s = 0.0);
        for (k, &band) in bin_to_band.iter().enumerate() {
            if band != usize::MAX {
                band_sums[band] += buf[k].norm();
            }
        }
        for band in 0..N_BINS {
            let mean = if band_counts[band] > 0 {
                band_sums[band] / band_counts[band] as f64
            } else {
                0.0
            };
            data.push((1.0 + mean).ln() as f32);
        }
    }

    Ok(BandMatrix { data, n_frames })
}

/// Cut `W` consecutive frames starting at `start_frame` and standardize them
/// to zero mean and unit variance. A constant patch maps to all zeros.
pub fn extract_patch(
    bands: &BandMatrix,
    start_frame: usize,
    config: &SpectrogramConfig,
    source_id: &str,
    speaker_id: Option<&str>,
) -> Result<SpectrogramPatch, SpectrogramError> {
    let width = config.patch_width_frames();
    if start_frame + width > bands.n_frames {
        return Err(SpectrogramError::OutOfRange {
            start_frame,
            width,
            n_frames: bands.n_frames,
        });
    }

    let raw = &bands.data[start_frame * N_BINS..(start_frame + width) * N_BINS];
    let n = raw.len() as f64;
    let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = raw
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let values = if std < 1e-12 {
        vec![0.0f32; raw.len()]
    } else {
        raw.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    };

    Ok(SpectrogramPatch {
        values,
        width,
        config: *config,
        start_ms: start_frame as u64 * config.h_ms,
        source_id: source_id.to_string(),
        speaker_id: speaker_id.map(str::to_string),
    })
}

/// Draw `count` patch start frames uniformly and extract the patches.
///
/// Starts are distinct when enough positions exist, otherwise drawn with
/// replacement. Deterministic for a given RNG state.
pub fn sample_patches<R: Rng>(
    bands: &BandMatrix,
    config: &SpectrogramConfig,
    count: usize,
    rng: &mut R,
    source_id: &str,
    speaker_id: Option<&str>,
) -> Result<Vec<SpectrogramPatch>, SpectrogramError> {
    let width = config.patch_width_frames();
    if width > bands.n_frames {
        return Err(SpectrogramError::OutOfRange {
            start_frame: 0,
            width,
            n_frames: bands.n_frames,
        });
    }
    let n_positions = bands.n_frames - width + 1;

    let starts: Vec<usize> = if n_positions >= count {
        // partial Fisher-Yates over the position range: distinct starts
        let mut positions: Vec<usize> = (0..n_positions).collect();
        for i in 0..count {
            let j = rng.gen_range(i..n_positions);
            positions.swap(i, j);
        }
        positions.truncate(count);
        positions
    } else {
        (0..count).map(|_| rng.gen_range(0..n_positions)).collect()
    };

    starts
        .into_iter()
        .map(|s| extract_patch(bands, s, config, source_id, speaker_id))
        .collect()
}

/// Dump patches as a flat binary tensor: little-endian u32 header
/// `(width, 256, count)` followed by `count * width * 256` f32 values.
pub fn write_patch_tensor(
    patches: &[SpectrogramPatch],
    path: &std::path::Path,
) -> std::io::Result<()> {
    use std::io::Write;
    let width = patches.first().map(|p| p.width).unwrap_or(0) as u32;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&width.to_le_bytes())?;
    out.write_all(&(N_BINS as u32).to_le_bytes())?;
    out.write_all(&(patches.len() as u32).to_le_bytes())?;
    for p in patches {
        for &v in &p.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

/// Read back a tensor written by [`write_patch_tensor`]: `(width, values per
/// patch)` where each inner vector holds `width * 256` floats.
pub fn read_patch_tensor(path: &std::path::Path) -> std::io::Result<(usize, Vec<Vec<f32>>)> {
    let bytes = std::fs::read(path)?;
    let hdr = |i: usize| -> u32 {
        u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]])
    };
    if bytes.len() < 12 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "tensor header truncated",
        ));
    }
    let width = hdr(0) as usize;
    let bins = hdr(4) as usize;
    let count = hdr(8) as usize;
    let per_patch = width * bins;
    if bytes.len() != 12 + count * per_patch * 4 || bins != N_BINS {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "tensor size does not match header",
        ));
    }
    let mut patches = Vec::with_capacity(count);
    let mut at = 12;
    for _ in 0..count {
        let mut vals = Vec::with_capacity(per_patch);
        for _ in 0..per_patch {
            vals.push(f32::from_le_bytes([
                bytes[at],
                bytes[at + 1],
                bytes[at + 2],
                bytes[at + 3],
            ]));
            at += 4;
        }
        patches.push(vals);
    }
    Ok((width, patches))
}

/// Export a band matrix as CSV (one frame per row) for plot tooling.
pub fn write_bands_csv(bands: &BandMatrix, out: &mut impl std::io::Write) -> std::io::Result<()> {
    for f in 0..bands.n_frames() {
        let row: Vec<String> = bands.frame(f).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
