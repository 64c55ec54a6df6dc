//! Raw-audio conditioning: WAV parsing/writing, resampling to the canonical
//! 16 kHz mono form, and pre-emphasis.
//!
//! Every operation here is a pure function of its inputs and may be called
//! concurrently from any number of threads.

use thiserror::Error;

/// Canonical sample rate the rest of the pipeline expects.
pub const CANONICAL_RATE_HZ: u32 = 16_000;

/// Conventional speech pre-emphasis coefficient.
pub const DEFAULT_PRE_EMPHASIS: f32 = 0.97;

#[derive(Debug, Error)]
pub enum AudioError {
    /// Not a RIFF/WAVE container, or chunk sizes are inconsistent.
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    /// The container is valid but carries a non-integer-PCM encoding.
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    /// The data chunk holds zero frames.
    #[error("audio stream contains no frames")]
    EmptyAudio,
    #[error("invalid sample rate: {0}")]
    InvalidRate(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A mono sample sequence with its sample rate.
///
/// Samples are normalized amplitudes in `[-1, 1]`; `source_id` is an opaque
/// identifier carried along so downstream artifacts can name the recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32, source_id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn duration_ms(&self) -> f64 {
        self.duration_s() * 1000.0
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, AudioError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| AudioError::MalformedContainer("truncated chunk".into()))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, AudioError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| AudioError::MalformedContainer("truncated chunk".into()))
}

struct FmtChunk {
    format_code: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Parse a RIFF/WAVE byte stream holding integer PCM samples.
///
/// Multi-channel input is averaged to mono; samples are scaled to `[-1, 1]`
/// by `2^(bits-1)`. 8-bit WAV data is unsigned per the format and re-centered
/// before scaling.
pub fn parse_wav(bytes: &[u8], source_id: impl Into<String>) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedContainer(
            "missing RIFF/WAVE magic".into(),
        ));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| AudioError::MalformedContainer("chunk size overflow".into()))?;
        if body_end > bytes.len() {
            return Err(AudioError::MalformedContainer(format!(
                "chunk '{}' overruns container",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::MalformedContainer("fmt chunk too small".into()));
                }
                fmt = Some(FmtChunk {
                    format_code: read_u16(bytes, body_start)?,
                    channels: read_u16(bytes, body_start + 2)?,
                    sample_rate: read_u32(bytes, body_start + 4)?,
                    bits_per_sample: read_u16(bytes, body_start + 14)?,
                });
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {} // LIST, fact, cue, ... are skipped
        }
        // chunk bodies are word-aligned; odd sizes carry a pad byte
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::MalformedContainer("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedContainer("missing data chunk".into()))?;

    if fmt.format_code != 1 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "format code {} (only integer PCM is handled)",
            fmt.format_code
        )));
    }
    if !matches!(fmt.bits_per_sample, 8 | 16 | 24 | 32) {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{}-bit PCM",
            fmt.bits_per_sample
        )));
    }
    if fmt.channels == 0 {
        return Err(AudioError::MalformedContainer("zero channels".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }

    let bytes_per_sample = (fmt.bits_per_sample / 8) as usize;
    let frame_bytes = bytes_per_sample * fmt.channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(AudioError::EmptyAudio);
    }

    let scale = 1.0 / (1i64 << (fmt.bits_per_sample - 1)) as f64;
    let channels = fmt.channels as usize;
    let mut samples = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        let mut acc = 0.0f64;
        for ch in 0..channels {
            let at = frame * frame_bytes + ch * bytes_per_sample;
            let raw: i64 = match fmt.bits_per_sample {
                8 => data[at] as i64 - 128,
                16 => i16::from_le_bytes([data[at], data[at + 1]]) as i64,
                24 => {
                    let v = (data[at] as i32) | ((data[at + 1] as i32) << 8) | ((data[at + 2] as i32) << 16);
                    // sign-extend from 24 bits
                    ((v << 8) >> 8) as i64
                }
                32 => i32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]]) as i64,
                _ => unreachable!(),
            };
            acc += raw as f64 * scale;
        }
        samples.push((acc / channels as f64) as f32);
    }

    Ok(AudioClip::new(samples, fmt.sample_rate, source_id))
}

/// Serialize a clip as 16-bit little-endian mono PCM.
///
/// Samples are quantized with `round(s * 32768)` clamped to the i16 range, so
/// a clip parsed from 16-bit PCM round-trips bit-exactly.
pub fn write_wav(clip: &AudioClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // integer PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Write a clip to a file as 16-bit mono PCM.
pub fn write_wav_file(clip: &AudioClip, path: &std::path::Path) -> Result<(), AudioError> {
    std::fs::write(path, write_wav(clip))?;
    Ok(())
}

/// Read and parse a WAV file; the file stem becomes the source id.
pub fn read_wav_file(path: &std::path::Path) -> Result<AudioClip, AudioError> {
    let bytes = std::fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned());
    parse_wav(&bytes, id)
}

// Zeroth-order modified Bessel function, by power series.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-14 {
            break;
        }
    }
    sum
}

const SINC_HALF_TAPS: i64 = 32;
const KAISER_BETA: f64 = 10.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited sample-rate conversion with a 64-tap windowed-sinc kernel
/// (Kaiser window). When the rates already match the clip passes through
/// bit-exactly. Output length is `round(len * target / source)`.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> Result<AudioClip, AudioError> {
    if target_rate_hz == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    if clip.sample_rate_hz == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    if target_rate_hz == clip.sample_rate_hz {
        return Ok(clip.clone());
    }

    let src_len = clip.samples.len();
    let ratio = target_rate_hz as f64 / clip.sample_rate_hz as f64;
    let out_len = (src_len as f64 * ratio).round() as usize;
    // cutoff relative to the source Nyquist; < 1 when decimating
    let cutoff = ratio.min(1.0);
    let window_norm = 1.0 / bessel_i0(KAISER_BETA);

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let pos = n as f64 / ratio;
        let i0 = pos.floor() as i64;
        let frac = pos - i0 as f64;
        let mut acc = 0.0f64;
        for k in (1 - SINC_HALF_TAPS)..=SINC_HALF_TAPS {
            let idx = i0 + k;
            if idx < 0 || idx >= src_len as i64 {
                continue;
            }
            let t = k as f64 - frac;
            let u = t / SINC_HALF_TAPS as f64;
            if u.abs() >= 1.0 {
                continue;
            }
            let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) * window_norm;
            acc += clip.samples[idx as usize] as f64 * cutoff * sinc(cutoff * t) * window;
        }
        out.push(acc as f32);
    }

    Ok(AudioClip::new(out, target_rate_hz, clip.source_id.clone()))
}

/// First-order high-pass filter `y[n] = x[n] - alpha * x[n-1]` (with
/// `y[0] = x[0]`), flattening the spectral tilt of voiced speech.
pub fn pre_emphasize(clip: &AudioClip, alpha: f32) -> AudioClip {
    let mut out = Vec::with_capacity(clip.samples.len());
    let mut prev = 0.0f32;
    for (i, &x) in clip.samples.iter().enumerate() {
        if i == 0 {
            out.push(x);
        } else {
            out.push(x - alpha * prev);
        }
        prev = x;
    }
    AudioClip::new(out, clip.sample_rate_hz, clip.source_id.clone())
}
