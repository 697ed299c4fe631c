//! Heuristic magnitude STFT: mixture energy above a boundary bin is shared
//! among sources in proportion to their low-band estimate magnitude.

use crate::error::{Error, Result};
use crate::stft::ComplexSpectrogram;

pub const HEURISTIC_EPS: f64 = 1e-8;

/// Bin index for a frequency boundary: `round(hz * fft / rate)`.
pub fn boundary_bin(freq_hz: f64, fft_size: usize, sample_rate: u32) -> Result<usize> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(freq_hz > 0.0 && freq_hz < nyquist) {
        return Err(Error::config(format!(
            "frequency boundary {freq_hz} Hz must lie in (0, {nyquist})"
        )));
    }
    Ok((freq_hz * fft_size as f64 / sample_rate as f64).round() as usize)
}

/// Per-source magnitudes, frame-major like the spectrograms. Below
/// `boundary` each source keeps its own estimate magnitude; from `boundary`
/// up it receives `|X| * w_i / (sum_j w_j + eps)` where `w_i` is the
/// frame's low-band magnitude sum of estimate `i`.
pub fn heuristic_stft(
    mixture: &ComplexSpectrogram,
    estimates: &[ComplexSpectrogram],
    boundary: usize,
) -> Result<Vec<Vec<f64>>> {
    let bins = mixture.n_bins();
    if boundary == 0 || boundary >= bins {
        return Err(Error::invalid(format!(
            "boundary bin {boundary} must lie in (0, {bins})"
        )));
    }
    if estimates.is_empty() || estimates.iter().any(|e| !e.same_shape(mixture)) {
        return Err(Error::shape("estimates must match the mixture spectrogram"));
    }
    let mut out = vec![Vec::with_capacity(mixture.data().len()); estimates.len()];
    for t in 0..mixture.n_frames() {
        let weights: Vec<f64> = estimates
            .iter()
            .map(|e| e.frame(t)[..boundary].iter().map(|c| c.norm()).sum())
            .collect();
        let total: f64 = weights.iter().sum::<f64>() + HEURISTIC_EPS;
        let mix = mixture.frame(t);
        for (i, e) in estimates.iter().enumerate() {
            let frame = e.frame(t);
            let share = weights[i] / total;
            out[i].extend(frame[..boundary].iter().map(|c| c.norm()));
            out[i].extend(mix[boundary..].iter().map(|c| c.norm() * share));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;
    use rustfft::num_complex::Complex64;

    fn spec(frames: usize, f: impl Fn(usize, usize) -> Complex64) -> ComplexSpectrogram {
        let cfg = StftConfig::new(16, 4, 16);
        let bins = cfg.n_bins();
        let data = (0..frames * bins).map(|i| f(i / bins, i % bins)).collect();
        ComplexSpectrogram::new(data, frames, cfg, 16_000).unwrap()
    }

    #[test]
    fn boundary_bins() {
        assert_eq!(boundary_bin(3000.0, 1024, 24_000).unwrap(), 128);
        assert_eq!(boundary_bin(1500.0, 512, 16_000).unwrap(), 48);
        assert!(boundary_bin(8000.0, 512, 16_000).is_err());
        assert!(boundary_bin(0.0, 512, 16_000).is_err());
    }

    #[test]
    fn single_active_source_takes_the_high_band() {
        let x = spec(3, |t, k| Complex64::new(1.0 + k as f64, t as f64));
        let a = spec(3, |_, k| Complex64::new(if k < 4 { 2.0 } else { 0.5 }, 0.0));
        let b = spec(3, |_, k| Complex64::new(if k < 4 { 0.0 } else { 0.5 }, 0.0));
        let h = heuristic_stft(&x, &[a, b], 4).unwrap();
        let bins = x.n_bins();
        for t in 0..3 {
            for k in 4..bins {
                let want = x.at(t, k).norm();
                assert!((h[0][t * bins + k] - want).abs() < 1e-6 * want.max(1.0));
                assert_eq!(h[1][t * bins + k], 0.0);
            }
            assert_eq!(h[0][t * bins], 2.0);
        }
    }

    #[test]
    fn equal_weights_split_in_half_and_silence_is_zero() {
        let x = spec(2, |t, _| Complex64::new(if t == 0 { 3.0 } else { 0.0 }, 0.0));
        let a = spec(2, |t, _| Complex64::new(if t == 0 { 1.0 } else { 0.0 }, 0.0));
        let h = heuristic_stft(&x, &[a.clone(), a], 3).unwrap();
        let bins = x.n_bins();
        for k in 3..bins {
            assert!((h[0][k] - 1.5).abs() < 1e-6);
            assert!((h[1][k] - 1.5).abs() < 1e-6);
            assert_eq!(h[0][bins + k], 0.0);
        }
        assert!(h.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_boundary_rejected() {
        let x = spec(1, |_, _| Complex64::new(1.0, 0.0));
        assert!(heuristic_stft(&x, &[x.clone()], 0).is_err());
        assert!(heuristic_stft(&x, &[x.clone()], x.n_bins()).is_err());
    }
}
