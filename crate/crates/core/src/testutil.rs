//! Shared oracles for unit tests. Everything here is brute-force or
//! high-precision on purpose and independent of the production code paths.

use crate::audio::AudioClip;

/// Locate the dominant frequency of a clip within `[lo_hz, hi_hz]` using a
/// zero-padded DFT, refined by parabolic interpolation around the peak bin.
pub fn fft_peak_hz(clip: &AudioClip, lo_hz: f64, hi_hz: f64) -> f64 {
    let n = clip.samples.len();
    let n_fft = (4 * n).next_power_of_two();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf: Vec<rustfft::num_complex::Complex<f64>> = clip
        .samples
        .iter()
        .map(|&s| rustfft::num_complex::Complex::new(s as f64, 0.0))
        .chain(std::iter::repeat(rustfft::num_complex::Complex::new(
            0.0, 0.0,
        )))
        .take(n_fft)
        .collect();
    fft.process(&mut buf);
    let hz_per_bin = clip.sample_rate_hz as f64 / n_fft as f64;
    let lo = (lo_hz / hz_per_bin).ceil() as usize;
    let hi = ((hi_hz / hz_per_bin).floor() as usize).min(n_fft / 2);
    let (mut best, mut best_mag) = (lo, 0.0f64);
    for k in lo..=hi {
        let m = buf[k].norm();
        if m > best_mag {
            best_mag = m;
            best = k;
        }
    }
    if best > 0 && best < n_fft / 2 {
        let (a, b, c) = (buf[best - 1].norm(), buf[best].norm(), buf[best + 1].norm());
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-30 {
            let delta = 0.5 * (a - c) / denom;
            return (best as f64 + delta) * hz_per_bin;
        }
    }
    best as f64 * hz_per_bin
}
