//! Differentiable STFT/iSTFT matching `medleysep_core::stft` sample for
//! sample, plus helpers to move audio in and out of tensors.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, D};
use medleysep_core::stft::{StftConfig, WOLA_FLOOR};
use medleysep_core::AudioBuffer;

use crate::error::{Error, Result};

/// Magnitude floor inside the square root so gradients stay finite at zero.
pub const MAG_EPS: f64 = 1e-12;

/// Analysis and synthesis bases for one STFT configuration.
#[derive(Debug, Clone)]
pub struct TensorStft {
    cfg: StftConfig,
    /// `[2 * bins, fft]`: windowed cosines then negated windowed sines.
    analysis: Tensor,
    /// `[fft, 2 * bins]`: inverse real DFT times the synthesis window.
    synthesis: Tensor,
}

impl TensorStft {
    pub fn new(cfg: StftConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.fft_size;
        let bins = cfg.n_bins();
        let w = cfg.frame_window();
        let mut analysis = vec![0.0; 2 * bins * n];
        let mut synthesis = vec![0.0; n * 2 * bins];
        for k in 0..bins {
            let scale = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            for i in 0..n {
                let a = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                analysis[k * n + i] = w[i] * a.cos();
                analysis[(bins + k) * n + i] = -w[i] * a.sin();
                synthesis[i * 2 * bins + k] = scale * a.cos() / n as f64 * w[i];
                synthesis[i * 2 * bins + bins + k] = -scale * a.sin() / n as f64 * w[i];
            }
        }
        Ok(Self {
            cfg,
            analysis: Tensor::from_vec(analysis, (2 * bins, n), device)?.to_dtype(dtype)?,
            synthesis: Tensor::from_vec(synthesis, (n, 2 * bins), device)?.to_dtype(dtype)?,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn n_bins(&self) -> usize {
        self.cfg.n_bins()
    }

    pub fn n_frames(&self, len: usize) -> usize {
        self.cfg.n_frames(len)
    }

    /// `[B, L]` waveforms to `[B, 2 * bins, T]` stacked real/imag parts.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, len) = x.dims2()?;
        let frames = self.cfg.n_frames(len);
        let left = if self.cfg.center_pad { self.cfg.fft_size / 2 } else { 0 };
        let needed = (frames - 1) * self.cfg.hop_size + self.cfg.fft_size;
        let right = needed.saturating_sub(len + left);
        let padded = x.pad_with_zeros(1, left, right)?;
        let framed = frame_signal(&padded, self.cfg.fft_size, self.cfg.hop_size, frames)?;
        Ok(self.analysis.broadcast_matmul(&framed)?)
    }

    /// `[B, 2 * bins, T]` to `[B, out_len]` waveforms.
    pub fn inverse(&self, spec: &Tensor, out_len: usize) -> Result<Tensor> {
        let (_, ch, frames) = spec.dims3()?;
        if ch != 2 * self.n_bins() {
            return Err(Error::config(format!(
                "spectrogram has {ch} channels, expected {}",
                2 * self.n_bins()
            )));
        }
        let expected = self.cfg.n_frames(out_len);
        if out_len == 0 || expected.abs_diff(frames) > 1 {
            return Err(medleysep_core::Error::InvalidInput(format!(
                "output length {out_len} implies {expected} frames but the spectrogram has {frames}"
            ))
            .into());
        }
        let framed = self.synthesis.broadcast_matmul(spec)?;
        let signal = overlap_add(&framed, self.cfg.hop_size)?;
        let left = if self.cfg.center_pad { self.cfg.fft_size / 2 } else { 0 };
        let total = signal.dim(1)?;
        let signal = if total < left + out_len {
            signal.pad_with_zeros(1, 0, left + out_len - total)?
        } else {
            signal
        };
        let signal = signal.narrow(1, left, out_len)?;
        let inv: Vec<f64> = self
            .cfg
            .synthesis_norm(frames, out_len)
            .into_iter()
            .map(|v| if v > WOLA_FLOOR { 1.0 / v } else { 0.0 })
            .collect();
        let inv = Tensor::from_vec(inv, out_len, spec.device())?.to_dtype(spec.dtype())?;
        Ok(signal.broadcast_mul(&inv)?)
    }
}

/// Cuts `[B, P]` into `frames` windows of `n` samples placed `hop` apart,
/// returned as `[B, n, frames]`. Inverse layout of [`overlap_add`].
pub fn frame_signal(x: &Tensor, n: usize, hop: usize, frames: usize) -> Result<Tensor> {
    let (b, len) = x.dims2()?;
    let r = n.div_ceil(hop);
    let needed = (frames + r - 1) * hop;
    let x = if len < needed {
        x.pad_with_zeros(1, 0, needed - len)?
    } else {
        x.narrow(1, 0, needed)?
    };
    let chunks = x.reshape((b, frames + r - 1, hop))?;
    let pieces = (0..r).map(|j| chunks.narrow(1, j, frames)).collect::<candle_core::Result<Vec<_>>>()?;
    let framed = Tensor::cat(&pieces, 2)?.narrow(2, 0, n)?;
    Ok(framed.transpose(1, 2)?.contiguous()?)
}

/// Sums `[B, n, T]` frames placed `hop` apart into `[B, (T + R - 1) * hop]`
/// with `R = ceil(n / hop)`.
pub fn overlap_add(frames: &Tensor, hop: usize) -> Result<Tensor> {
    let (b, n, t) = frames.dims3()?;
    let r = n.div_ceil(hop);
    let frames = frames.pad_with_zeros(1, 0, r * hop - n)?.transpose(1, 2)?;
    let mut out: Option<Tensor> = None;
    for j in 0..r {
        let piece = frames
            .narrow(2, j * hop, hop)?
            .contiguous()?
            .reshape((b, t * hop))?
            .pad_with_zeros(1, j * hop, (r - 1 - j) * hop)?;
        out = Some(match out {
            Some(acc) => (acc + piece)?,
            None => piece,
        });
    }
    Ok(out.expect("at least one chunk"))
}

/// Splits `[..., 2 * bins, T]` into real and imaginary halves.
pub fn split_complex(spec: &Tensor) -> Result<(Tensor, Tensor)> {
    let ch = spec.dim(D::Minus2)?;
    let bins = ch / 2;
    Ok((spec.narrow(D::Minus2, 0, bins)?, spec.narrow(D::Minus2, bins, bins)?))
}

/// `sqrt(re^2 + im^2 + MAG_EPS)` over stacked real/imag channels.
pub fn magnitude(spec: &Tensor) -> Result<Tensor> {
    let (re, im) = split_complex(spec)?;
    Ok((re.sqr()? + im.sqr()?)?.affine(1.0, MAG_EPS)?.sqrt()?)
}

/// Stacks mono buffers of equal length into `[B, L]`.
pub fn batch_tensor(buffers: &[&AudioBuffer], dtype: DType, device: &Device) -> Result<Tensor> {
    let len = buffers.first().map(|b| b.len()).unwrap_or(0);
    if buffers.iter().any(|b| b.len() != len) {
        return Err(Error::config("buffers in a batch must share one length"));
    }
    let data: Vec<f64> = buffers.iter().flat_map(|b| b.samples().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (buffers.len(), len), device)?.to_dtype(dtype)?)
}

/// Rows of a `[B, L]` tensor as audio buffers.
pub fn tensor_buffers(x: &Tensor, sample_rate: u32) -> Result<Vec<AudioBuffer>> {
    let rows = x.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    rows.into_iter()
        .map(|r| AudioBuffer::new(r, sample_rate).map_err(Error::from))
        .collect()
}
