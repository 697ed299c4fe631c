//! One-sided STFT analysis and weighted overlap-add synthesis.
//!
//! Framing convention (shared with the tensor implementation in the model
//! crate): with `center_pad` the signal is preceded by `fft_size / 2` zeros,
//! frame `t` starts at `t * hop_size` of the padded signal, and there are
//! `1 + ceil(len / hop_size)` frames. Without centering there are
//! `1 + ceil(max(len - fft_size, 0) / hop_size)` frames. The window (length
//! `win_size`) sits centered inside each `fft_size` frame.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Below this overlap-added window power a sample is treated as uncovered.
/// Samples whose overlap-added window power is below this are zeroed on
/// synthesis.
pub const WOLA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn samples(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n as f64;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_size: usize,
    pub hop_size: usize,
    pub window: Window,
    pub center_pad: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            win_size: 1024,
            hop_size: 256,
            window: Window::Hann,
            center_pad: true,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop_size: usize, win_size: usize) -> Self {
        Self {
            fft_size,
            win_size,
            hop_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.hop_size > self.win_size || self.win_size > self.fft_size {
            return Err(Error::config(format!(
                "STFT sizes must satisfy 0 < hop ({}) <= win ({}) <= fft ({})",
                self.hop_size, self.win_size, self.fft_size
            )));
        }
        if self.fft_size < 2 {
            return Err(Error::config("fft_size must be at least 2"));
        }
        // Weighted overlap-add needs the summed squared window to stay away
        // from zero at every phase of the hop.
        let w = self.frame_window();
        let mut acc = vec![0.0; self.hop_size];
        for (i, v) in w.iter().enumerate() {
            acc[i % self.hop_size] += v * v;
        }
        let max = acc.iter().cloned().fold(0.0, f64::max);
        let min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 1e-3 * max) {
            return Err(Error::config(format!(
                "window {:?} with win {} and hop {} does not overlap-add to a positive constant",
                self.window, self.win_size, self.hop_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if self.center_pad {
            1 + len.div_ceil(self.hop_size)
        } else {
            1 + len.saturating_sub(self.fft_size).div_ceil(self.hop_size)
        }
    }

    fn left_pad(&self) -> usize {
        if self.center_pad {
            self.fft_size / 2
        } else {
            0
        }
    }

    /// Window of `win_size` zero-padded and centered to `fft_size`.
    pub fn frame_window(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.fft_size];
        let off = (self.fft_size - self.win_size) / 2;
        out[off..off + self.win_size].copy_from_slice(&self.window.samples(self.win_size));
        out
    }

    /// Overlap-added squared window at each of the `out_len` output samples
    /// of an `n_frames`-frame synthesis.
    pub fn synthesis_norm(&self, n_frames: usize, out_len: usize) -> Vec<f64> {
        let w = self.frame_window();
        let pad = self.left_pad();
        let mut norm = vec![0.0; out_len];
        for t in 0..n_frames {
            for (i, v) in w.iter().enumerate() {
                let idx = t * self.hop_size + i;
                if idx >= pad && idx - pad < out_len {
                    norm[idx - pad] += v * v;
                }
            }
        }
        norm
    }

    /// Overlap-added squared window, constant for hop-aligned interior samples.
    pub fn wola_gain(&self) -> f64 {
        let w = self.frame_window();
        let mut acc = vec![0.0; self.hop_size];
        for (i, v) in w.iter().enumerate() {
            acc[i % self.hop_size] += v * v;
        }
        acc.iter().sum::<f64>() / self.hop_size as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    n_frames: usize,
    config: StftConfig,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(
        data: Vec<Complex64>,
        n_frames: usize,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        config.validate()?;
        if data.len() != n_frames * config.n_bins() {
            return Err(Error::shape(format!(
                "{} coefficients do not fill {} frames x {} bins",
                data.len(),
                n_frames,
                config.n_bins()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::invalid("spectrogram contains non-finite coefficients"));
        }
        Ok(Self {
            data,
            n_frames,
            config,
            sample_rate,
        })
    }

    pub fn zeros_like(other: &ComplexSpectrogram) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); other.data.len()],
            ..other.clone()
        }
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.n_bins() + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        let b = self.n_bins();
        &self.data[frame * b..(frame + 1) * b]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn same_shape(&self, other: &ComplexSpectrogram) -> bool {
        self.n_frames == other.n_frames
            && self.config == other.config
            && self.sample_rate == other.sample_rate
    }

    /// Element-wise map producing a spectrogram with the same layout.
    pub fn map(&self, f: impl Fn(usize, Complex64) -> Complex64) -> ComplexSpectrogram {
        ComplexSpectrogram {
            data: self.data.iter().enumerate().map(|(i, &c)| f(i, c)).collect(),
            ..self.clone()
        }
    }

    /// `a·self + b·other`.
    pub fn linear_combination(&self, a: f64, other: &ComplexSpectrogram, b: f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::shape("spectrogram layouts differ"));
        }
        Ok(self.map(|i, c| c * a + other.data[i] * b))
    }
}

pub fn stft(x: &AudioBuffer, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = cfg.fft_size;
    let bins = cfg.n_bins();
    let frames = cfg.n_frames(x.len());
    let pad = cfg.left_pad();
    let window = cfg.frame_window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let samples = x.samples();

    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = (t * cfg.hop_size) as isize - pad as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let v = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
            *slot = Complex64::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram::new(data, frames, *cfg, x.sample_rate())
}

pub fn istft(spec: &ComplexSpectrogram, out_len: usize) -> Result<AudioBuffer> {
    let cfg = spec.config;
    if out_len == 0 {
        return Err(Error::invalid("istft output length must be positive"));
    }
    let expected = cfg.n_frames(out_len);
    if expected.abs_diff(spec.n_frames) > 1 {
        return Err(Error::invalid(format!(
            "output length {out_len} implies {expected} frames but the spectrogram has {}",
            spec.n_frames
        )));
    }
    let n = cfg.fft_size;
    let bins = cfg.n_bins();
    let pad = cfg.left_pad();
    let window = cfg.frame_window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);

    let total = pad + out_len;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..spec.n_frames {
        let frame = spec.frame(t);
        for k in 0..bins {
            buf[k] = frame[k];
        }
        // Hermitian completion; DC and Nyquist must be real.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_size;
        for i in 0..n {
            let idx = start + i;
            if idx >= total {
                break;
            }
            acc[idx] += buf[i].re / n as f64 * window[i];
            norm[idx] += window[i] * window[i];
        }
    }
    let out = (pad..total)
        .map(|i| {
            if norm[i] > WOLA_FLOOR {
                acc[i] / norm[i]
            } else {
                0.0
            }
        })
        .collect();
    AudioBuffer::new(out, spec.sample_rate)
}

/// Signal energy recovered from a spectrogram: one-sided bins doubled except
/// DC and Nyquist, divided by `fft_size` and the overlap-added window power.
/// Equals the time-domain energy when the signal is silent within one frame
/// of either edge.
pub fn spectral_energy(spec: &ComplexSpectrogram) -> f64 {
    let n = spec.config.fft_size;
    let bins = spec.n_bins();
    let mut total = 0.0;
    for t in 0..spec.n_frames {
        for (k, c) in spec.frame(t).iter().enumerate() {
            let w = if k == 0 || (n % 2 == 0 && k == bins - 1) {
                1.0
            } else {
                2.0
            };
            total += w * c.norm_sqr();
        }
    }
    total / (n as f64 * spec.config.wola_gain())
}
