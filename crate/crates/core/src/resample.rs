//! Band-limited resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Zero crossings of the low-pass kernel on each side of the center tap.
const ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Reads `samples` at positions `n * step` for `n < out_len` through a
/// low-pass interpolator whose cutoff is `cutoff` times the input Nyquist
/// frequency. Positions past either end read as silence.
pub fn interpolate(samples: &[f64], step: f64, out_len: usize, cutoff: f64) -> Vec<f64> {
    let cutoff = cutoff.clamp(1e-6, 1.0);
    let half = ZERO_CROSSINGS / cutoff;
    let norm = bessel_i0(KAISER_BETA);
    (0..out_len)
        .map(|n| {
            let t = n as f64 * step;
            let lo = (t - half).ceil().max(0.0) as isize;
            let hi = ((t + half).floor() as isize).min(samples.len() as isize - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let d = t - k as f64;
                let r = d / half;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                acc += samples[k as usize] * cutoff * sinc(cutoff * d) * w;
            }
            acc
        })
        .collect()
}

/// Resamples to `target_rate`; the output has `round(len * target / source)`
/// samples. Equal rates return an identical copy.
pub fn resample(x: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    let source_rate = x.sample_rate();
    if source_rate == target_rate {
        return Ok(x.clone());
    }
    let ratio = target_rate as f64 / source_rate as f64;
    let out_len = ((x.len() as f64 * ratio).round() as usize).max(1);
    let cutoff = ratio.min(1.0) * ROLLOFF;
    let out = interpolate(x.samples(), 1.0 / ratio, out_len, cutoff);
    AudioBuffer::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize) -> AudioBuffer {
        let s = (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    /// Peak bin of a Hann-windowed direct DFT over the middle of the signal.
    fn peak_hz(x: &AudioBuffer, n: usize) -> f64 {
        let s = x.samples();
        let start = (s.len() - n) / 2;
        let mut best = (0, 0.0);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                let ang = 2.0 * PI * (k * i) as f64 / n as f64;
                re += s[start + i] * w * ang.cos();
                im -= s[start + i] * w * ang.sin();
            }
            let m = re * re + im * im;
            if m > best.1 {
                best = (k, m);
            }
        }
        best.0 as f64 * x.sample_rate() as f64 / n as f64
    }

    #[test]
    fn identity_rate_is_bit_identical() {
        let x = sine(440.0, 24_000, 1000);
        assert_eq!(resample(&x, 24_000).unwrap(), x);
    }

    #[test]
    fn output_length_rounds() {
        let x = sine(440.0, 44_100, 44_101);
        assert_eq!(resample(&x, 16_000).unwrap().len(), 16_000);
        let y = sine(440.0, 16_000, 999);
        assert_eq!(resample(&y, 24_000).unwrap().len(), 1499);
    }

    #[test]
    fn tone_survives_downsampling() {
        let x = sine(1000.0, 48_000, 48_000);
        let y = resample(&x, 24_000).unwrap();
        let bin = 24_000.0 / 2048.0;
        assert!((peak_hz(&y, 2048) - 1000.0).abs() < bin);
        let rms = (y.energy() / y.len() as f64).sqrt();
        assert!((rms - 0.5f64.sqrt()).abs() < 0.01, "{rms}");
    }

    #[test]
    fn content_above_new_nyquist_is_removed() {
        let x = sine(10_000.0, 48_000, 48_000);
        let y = resample(&x, 16_000).unwrap();
        let interior = &y.samples()[500..y.len() - 500];
        let energy: f64 = interior.iter().map(|v| v * v).sum::<f64>() / interior.len() as f64;
        let db = 10.0 * (energy / 0.5).log10();
        assert!(db < -40.0, "{db}");
    }

    #[test]
    fn upsampling_preserves_tone() {
        let x = sine(3000.0, 16_000, 16_000);
        let y = resample(&x, 44_100).unwrap();
        let bin = 44_100.0 / 4096.0;
        assert!((peak_hz(&y, 4096) - 3000.0).abs() < bin);
    }
}
