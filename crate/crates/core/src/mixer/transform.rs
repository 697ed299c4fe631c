//! Duration-preserving pitch and formant transforms.
//!
//! Pitch: phase-vocoder time stretch by the pitch factor, then band-limited
//! reading of the stretched signal at that factor, which restores the
//! original length and scales every frequency by it.
//!
//! Formant: per-frame spectral envelope from iterative cepstral smoothing
//! (the envelope is pushed up until it rests on the harmonic peaks), then
//! the envelope is warped along frequency while the excitation, and so the
//! fundamental, stays in place.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::resample::interpolate;
use crate::stft::{istft, stft, StftConfig, Window};

/// Largest accepted shift: one octave plus the detune range.
pub const MAX_SHIFT_CENTS: f64 = 1220.0;

const PV_FFT: usize = 2048;
const PV_HOP: usize = 512;

/// Cepstral lifter cutoff; envelopes are resolved down to this quefrency.
const ENVELOPE_QUEFRENCY_SECS: f64 = 0.0025;
const ENVELOPE_ITERATIONS: usize = 60;
/// Stop once no log-magnitude exceeds the envelope by more than this (nats).
const ENVELOPE_TOLERANCE: f64 = 0.1;

fn wrap_phase(p: f64) -> f64 {
    let two_pi = 2.0 * PI;
    p - two_pi * ((p + PI) / two_pi).floor()
}

/// Phase-vocoder stretch: output frames advance `PV_HOP` samples while input
/// frames advance `analysis_hop`. Time zero maps to time zero.
fn phase_vocoder(x: &[f64], analysis_hop: usize) -> Vec<f64> {
    let n = PV_FFT;
    let half = n / 2;
    let window = Window::Hann.samples(n);
    let frames = 1 + x.len().div_ceil(analysis_hop);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let out_len = (frames - 1) * PV_HOP + n;
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut prev_phase = vec![0.0; half + 1];
    let mut synth_phase = vec![0.0; half + 1];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];

    for t in 0..frames {
        let start = (t * analysis_hop) as isize - half as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let v = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize]
            } else {
                0.0
            };
            *slot = Complex64::new(v * window[i], 0.0);
        }
        fwd.process(&mut buf);
        for k in 0..=half {
            let phase = buf[k].arg();
            if t == 0 {
                synth_phase[k] = phase;
            } else {
                let omega = 2.0 * PI * k as f64 / n as f64;
                let dev = wrap_phase(phase - prev_phase[k] - omega * analysis_hop as f64);
                let inst = omega + dev / analysis_hop as f64;
                synth_phase[k] += inst * PV_HOP as f64;
            }
            prev_phase[k] = phase;
            buf[k] = Complex64::from_polar(buf[k].norm(), synth_phase[k]);
        }
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        for k in half + 1..n {
            buf[k] = buf[n - k].conj();
        }
        inv.process(&mut buf);
        let o = t * PV_HOP;
        for i in 0..n {
            out[o + i] += buf[i].re / n as f64 * window[i];
            norm[o + i] += window[i] * window[i];
        }
    }
    out.iter()
        .zip(&norm)
        .skip(half)
        .map(|(v, w)| if *w > 1e-10 { v / w } else { 0.0 })
        .collect()
}

/// Shifts pitch by `cents` while keeping the duration exactly.
pub fn pitch_shift(x: &AudioBuffer, cents: f64) -> Result<AudioBuffer> {
    if !cents.is_finite() || cents.abs() > MAX_SHIFT_CENTS {
        return Err(Error::invalid(format!(
            "pitch shift of {cents} cents outside ±{MAX_SHIFT_CENTS}"
        )));
    }
    if cents == 0.0 {
        return Ok(x.clone());
    }
    pitch_shift_unchecked(x, cents)
}

/// The vocoder path without the zero-shift shortcut.
pub fn pitch_shift_unchecked(x: &AudioBuffer, cents: f64) -> Result<AudioBuffer> {
    let factor = 2f64.powf(cents / 1200.0);
    let analysis_hop = ((PV_HOP as f64 / factor).round() as usize).max(1);
    let stretched = phase_vocoder(x.samples(), analysis_hop);
    let cutoff = (1.0 / factor).min(1.0) * 0.94;
    let out = interpolate(&stretched, factor, x.len(), cutoff);
    AudioBuffer::new(out, x.sample_rate())
}

/// Frames of about 64 ms, zero-padded 4x so harmonic peaks are sampled
/// without scalloping.
fn envelope_stft_config(sample_rate: u32) -> StftConfig {
    let target = (sample_rate as f64 * 0.064) as usize;
    let win = target.next_power_of_two().max(256);
    StftConfig::new(win * 4, win / 4, win)
}

/// Cepstrally smoothed log-magnitude envelope resting on the spectral peaks
/// of one frame. Input and output are one-sided natural-log magnitudes.
pub fn true_envelope(log_mag: &[f64], fft_size: usize, lifter: usize) -> Vec<f64> {
    let bins = log_mag.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_size);
    let inv = planner.plan_fft_inverse(fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    let mut smooth = |a: &[f64]| -> Vec<f64> {
        for k in 0..fft_size {
            let src = if k < bins { k } else { fft_size - k };
            buf[k] = Complex64::new(a[src], 0.0);
        }
        inv.process(&mut buf);
        for (q, c) in buf.iter_mut().enumerate() {
            let keep = q <= lifter || q >= fft_size - lifter;
            *c = if keep { *c / fft_size as f64 } else { Complex64::new(0.0, 0.0) };
        }
        fwd.process(&mut buf);
        buf[..bins].iter().map(|c| c.re).collect()
    };

    let mut target = log_mag.to_vec();
    let mut env = smooth(&target);
    for _ in 0..ENVELOPE_ITERATIONS {
        let excess = log_mag
            .iter()
            .zip(&env)
            .map(|(a, v)| a - v)
            .fold(f64::NEG_INFINITY, f64::max);
        if excess <= ENVELOPE_TOLERANCE {
            break;
        }
        for (t, v) in target.iter_mut().zip(&env) {
            *t = t.max(*v);
        }
        env = smooth(&target);
    }
    env
}

/// Value of a one-sided curve at fractional bin `pos`, clamped at the ends.
fn sample_curve(curve: &[f64], pos: f64) -> f64 {
    let last = curve.len() - 1;
    if pos <= 0.0 {
        return curve[0];
    }
    if pos >= last as f64 {
        return curve[last];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    curve[i] * (1.0 - frac) + curve[i + 1] * frac
}

/// Moves the spectral envelope by `ratio` along frequency, preserving f0 and
/// duration. `ratio == 1` returns the input unchanged.
pub fn formant_shift(x: &AudioBuffer, ratio: f64) -> Result<AudioBuffer> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::invalid(format!("formant ratio must be positive, got {ratio}")));
    }
    if ratio == 1.0 {
        return Ok(x.clone());
    }
    formant_warp(x, ratio)
}

/// The envelope-warping path without the unit-ratio shortcut.
pub fn formant_warp(x: &AudioBuffer, ratio: f64) -> Result<AudioBuffer> {
    let cfg = envelope_stft_config(x.sample_rate());
    let spec = stft(x, &cfg)?;
    let bins = spec.n_bins();
    let lifter = ((ENVELOPE_QUEFRENCY_SECS * x.sample_rate() as f64).round() as usize)
        .clamp(4, cfg.fft_size / 4);
    let peak = spec.data().iter().fold(0.0f64, |m, c| m.max(c.norm()));
    let floor = peak * 1e-6 + 1e-12;

    let mut data = Vec::with_capacity(spec.data().len());
    for t in 0..spec.n_frames() {
        let frame = spec.frame(t);
        let log_mag: Vec<f64> = frame.iter().map(|c| (c.norm() + floor).ln()).collect();
        let env = true_envelope(&log_mag, cfg.fft_size, lifter);
        for (k, c) in frame.iter().enumerate() {
            let warped = sample_curve(&env, k as f64 / ratio);
            data.push(c * (warped - env[k]).exp());
        }
        debug_assert_eq!(data.len(), (t + 1) * bins);
    }
    let warped = crate::stft::ComplexSpectrogram::new(data, spec.n_frames(), cfg, x.sample_rate())?;
    istft(&warped, x.len())
}
