//! iSRNet: refines a backbone's initial estimates from the mixture,
//! estimate and heuristic magnitude spectrograms with ConvNeXt-style blocks.

use candle_core::{DType, Tensor};
use medleysep_core::heuristic::{boundary_bin, HEURISTIC_EPS};
use medleysep_core::stft::StftConfig;
use serde::{Deserialize, Serialize};

use crate::dsp::{magnitude, split_complex, TensorStft};
use crate::error::{Error, Result};
use crate::layers::{ChannelLayerNorm, DepthwiseConv2d, Pointwise};
use crate::params::ParamStore;

pub const BOUNDARY_CHOICES_HZ: [u32; 4] = [1500, 3000, 4500, 6000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ISRNetConfig {
    pub n_convnext_blocks: usize,
    pub channels: usize,
    /// Depthwise kernel size over (frequency, time).
    pub kernel: usize,
    pub freq_boundary_hz: u32,
    pub stft: StftConfig,
    pub sample_rate: u32,
    /// Initial value of the per-channel residual scale.
    pub layer_scale_init: f64,
    /// Inputs are `log1p` magnitudes.
    pub log_magnitudes: bool,
}

impl Default for ISRNetConfig {
    fn default() -> Self {
        Self {
            n_convnext_blocks: 8,
            channels: 48,
            kernel: 7,
            freq_boundary_hz: 3000,
            stft: StftConfig::default(),
            sample_rate: 24_000,
            layer_scale_init: 0.1,
            log_magnitudes: true,
        }
    }
}

impl ISRNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !BOUNDARY_CHOICES_HZ.contains(&self.freq_boundary_hz) {
            return Err(Error::config(format!(
                "freq_boundary_hz must be one of {BOUNDARY_CHOICES_HZ:?}, got {}",
                self.freq_boundary_hz
            )));
        }
        if self.n_convnext_blocks == 0 || self.channels == 0 {
            return Err(Error::config("iSRNet needs at least one block and one channel"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("iSRNet kernel must be odd, got {}", self.kernel)));
        }
        if !self.log_magnitudes {
            return Err(Error::config("only log1p magnitude inputs are supported"));
        }
        self.stft.validate()?;
        self.boundary_bin().map(|_| ())
    }

    pub fn boundary_bin(&self) -> Result<usize> {
        Ok(boundary_bin(self.freq_boundary_hz as f64, self.stft.fft_size, self.sample_rate)?)
    }
}

/// Tensor form of the heuristic magnitude STFT. `mix` is `[B, F, T]`,
/// `est` is `[B, N, F, T]`; returns `[B, N, F, T]`.
pub fn heuristic_magnitudes(mix: &Tensor, est: &Tensor, boundary: usize) -> Result<Tensor> {
    let (b, n, f, t) = est.dims4()?;
    if mix.dims() != [b, f, t] {
        return Err(Error::config(format!(
            "mixture magnitudes {:?} do not match estimates {:?}",
            mix.dims(),
            est.dims()
        )));
    }
    if boundary == 0 || boundary >= f {
        return Err(Error::config(format!("boundary bin {boundary} must lie in (0, {f})")));
    }
    let low = est.narrow(2, 0, boundary)?;
    let weights = low.sum_keepdim(2)?;
    let total = weights.sum_keepdim(1)?.affine(1.0, HEURISTIC_EPS)?;
    let share = weights.broadcast_div(&total)?;
    let high = mix
        .narrow(1, boundary, f - boundary)?
        .unsqueeze(1)?
        .broadcast_mul(&share)?;
    let _ = n;
    Ok(Tensor::cat(&[&low, &high], 2)?)
}

#[derive(Debug, Clone)]
struct ConvNextBlock {
    depthwise: DepthwiseConv2d,
    norm: ChannelLayerNorm,
    expand: Pointwise,
    project: Pointwise,
    scale: Tensor,
}

impl ConvNextBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ISRNetConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            depthwise: DepthwiseConv2d::new(ps, &format!("{name}.dw"), c, cfg.kernel)?,
            norm: ChannelLayerNorm::new(ps, &format!("{name}.norm"), c)?,
            expand: Pointwise::new(ps, &format!("{name}.expand"), c, 4 * c)?,
            project: Pointwise::new(ps, &format!("{name}.project"), 4 * c, c)?,
            scale: ps.constant(&format!("{name}.scale"), &[c], cfg.layer_scale_init)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.depthwise.forward(x)?)?;
        let y = self.project.forward(&self.expand.forward(&y)?.gelu()?)?;
        let c = self.scale.dim(0)?;
        let y = y.broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)?;
        Ok((x + y)?)
    }
}

/// Refinement network. Parameters live in the caller's store under `prefix`.
#[derive(Debug, Clone)]
pub struct ISRNet {
    config: ISRNetConfig,
    stft: TensorStft,
    boundary: usize,
    stem: Pointwise,
    blocks: Vec<ConvNextBlock>,
    head: Pointwise,
    n_sources: usize,
}

/// Scale of the output head's initial weights; small so refinement starts
/// near identity.
const HEAD_INIT: f64 = 1e-3;

impl ISRNet {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: &ISRNetConfig, n_sources: usize) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let n_in = 1 + 2 * n_sources;
        let stem = Pointwise::new(ps, &format!("{prefix}.stem"), n_in, c)?;
        let blocks = (0..config.n_convnext_blocks)
            .map(|i| ConvNextBlock::new(ps, &format!("{prefix}.block{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let head = Pointwise::with_scale(ps, &format!("{prefix}.head"), c, n_sources, HEAD_INIT)?;
        Ok(Self {
            config: config.clone(),
            stft: TensorStft::new(config.stft, ps.dtype(), ps.device())?,
            boundary: config.boundary_bin()?,
            stem,
            blocks,
            head,
            n_sources,
        })
    }

    pub fn config(&self) -> &ISRNetConfig {
        &self.config
    }

    /// `mixture [B, L]` and backbone outputs `[B, N, L]` to refined
    /// `[B, N, L]` waveforms.
    pub fn forward(&self, mixture: &Tensor, initial: &Tensor) -> Result<Tensor> {
        let (b, len) = mixture.dims2()?;
        let (b2, n, len2) = initial.dims3()?;
        if b2 != b || len2 != len || n != self.n_sources {
            return Err(Error::config(format!(
                "initial estimates {:?} do not match mixture {:?} with {} sources",
                initial.dims(),
                mixture.dims(),
                self.n_sources
            )));
        }
        let mix_spec = self.stft.forward(mixture)?;
        let est_spec = self.stft.forward(&initial.reshape((b * n, len))?)?;
        let mix_mag = magnitude(&mix_spec)?;
        let (_, f, t) = mix_mag.dims3()?;
        let est_mag = magnitude(&est_spec)?.reshape((b, n, f, t))?;
        let heuristic = heuristic_magnitudes(&mix_mag, &est_mag, self.boundary)?;

        let log1p = |x: &Tensor| -> Result<Tensor> { Ok(x.affine(1.0, 1.0)?.log()?) };
        let est_log = log1p(&est_mag)?;
        let features = Tensor::cat(&[&log1p(&mix_mag.unsqueeze(1)?)?, &est_log, &log1p(&heuristic)?], 1)?;
        let mut h = self.stem.forward(&features)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let delta = self.head.forward(&h)?;
        let refined = ((&est_log + delta)?.relu()?.exp()? - 1.0)?;

        let (re, im) = split_complex(&est_spec)?;
        let est_mag = est_mag.reshape((b * n, f, t))?;
        let gain = (refined.reshape((b * n, f, t))? / est_mag)?;
        let spec = Tensor::cat(&[(re * &gain)?, (im * &gain)?], 1)?;
        Ok(self.stft.inverse(&spec, len)?.reshape((b, n, len))?)
    }
}

/// Dense SRNet-style convolution stack used as the size reference for
/// iSRNet: `5x5` convolutions `in -> 256 -> ... -> out`.
#[derive(Debug, Clone)]
pub struct SrnetStack {
    layers: Vec<(Tensor, Tensor)>,
}

impl SrnetStack {
    pub const CHANNELS: usize = 256;
    pub const KERNEL: usize = 5;
    pub const HIDDEN_LAYERS: usize = 4;

    pub fn new(ps: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let k = Self::KERNEL;
        let mut dims = vec![c_in];
        dims.extend(std::iter::repeat(Self::CHANNELS).take(Self::HIDDEN_LAYERS + 1));
        dims.push(c_out);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / ((w[0] * k * k) as f64).sqrt();
                let weight = ps.uniform(&format!("{prefix}.conv{i}.weight"), &[w[1], w[0], k, k], bound)?;
                let bias = ps.uniform(&format!("{prefix}.conv{i}.bias"), &[w[1]], bound)?;
                Ok((weight, bias))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `[B, C_in, F, T]` to `[B, C_out, F, T]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pad = Self::KERNEL / 2;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.conv2d(w, pad, 1, 1, 1)?;
            h = h.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Trainable scalars of the reference iSRNet and of the SRNet-style stack
/// with the same inputs and outputs.
pub fn size_comparison(config: &ISRNetConfig, n_sources: usize) -> Result<(usize, usize)> {
    let mut a = ParamStore::new(0, DType::F32);
    ISRNet::new(&mut a, "isrnet", config, n_sources)?;
    let mut b = ParamStore::new(0, DType::F32);
    SrnetStack::new(&mut b, "srnet", 1 + 2 * n_sources, n_sources)?;
    Ok((a.count(), b.count()))
}
