//! Conv-TasNet: a temporal convolutional separator between either an STFT
//! encoder/decoder (complex spectral mapping) or learned filterbanks
//! (masking).

use candle_core::{DType, Device, Tensor};
use medleysep_core::stft::StftConfig;
use serde::{Deserialize, Serialize};

use crate::dsp::{frame_signal, overlap_add, TensorStft};
use crate::error::{Error, Result};
use crate::layers::{sigmoid, DepthwiseConv1d, GlobalLayerNorm, PRelu, Pointwise};
use crate::losses::mixture_consistency;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Learnable,
    Stft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    Base,
    /// Bottleneck and convolution channels doubled.
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    /// Blocks per repeat (X).
    pub n_blocks: usize,
    /// Repeats (R).
    pub n_repeats: usize,
    /// Bottleneck channels (B).
    pub bottleneck_ch: usize,
    /// Channels inside each block (H).
    pub conv_ch: usize,
    /// Depthwise kernel size (P).
    pub kernel: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            n_repeats: 3,
            bottleneck_ch: 128,
            conv_ch: 512,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub basis: Basis,
    pub n_sources: usize,
    pub tcn: TcnConfig,
    pub stft: StftConfig,
    pub model_scale: ModelScale,
    /// Number of learned filters (N), learnable basis only.
    pub n_filters: usize,
    /// Learned filter length (L); the stride is half of it.
    pub filter_len: usize,
    /// Project outputs so they sum to the mixture.
    pub mixture_consistency: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            basis: Basis::Stft,
            n_sources: 2,
            tcn: TcnConfig::default(),
            stft: StftConfig::default(),
            model_scale: ModelScale::Base,
            n_filters: 512,
            filter_len: 16,
            mixture_consistency: true,
        }
    }
}

impl BackboneConfig {
    /// TCN sizes after applying the model scale.
    pub fn effective_tcn(&self) -> TcnConfig {
        match self.model_scale {
            ModelScale::Base => self.tcn,
            ModelScale::Large => TcnConfig {
                bottleneck_ch: self.tcn.bottleneck_ch * 2,
                conv_ch: self.tcn.conv_ch * 2,
                ..self.tcn
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sources != 2 {
            return Err(Error::config(format!(
                "n_sources must be 2, got {}",
                self.n_sources
            )));
        }
        let t = &self.tcn;
        if t.n_blocks == 0 || t.n_repeats == 0 || t.bottleneck_ch == 0 || t.conv_ch == 0 {
            return Err(Error::config("TCN sizes must be positive"));
        }
        if t.kernel % 2 == 0 {
            return Err(Error::config(format!("TCN kernel must be odd, got {}", t.kernel)));
        }
        match self.basis {
            Basis::Stft => self.stft.validate()?,
            Basis::Learnable => {
                if self.filter_len < 2 || self.filter_len % 2 != 0 || self.n_filters == 0 {
                    return Err(Error::config("learned filters need an even length >= 2"));
                }
            }
        }
        Ok(())
    }

    /// Shortest mixture the model accepts.
    pub fn min_len(&self) -> usize {
        match self.basis {
            Basis::Stft => self.stft.fft_size,
            Basis::Learnable => self.filter_len,
        }
    }
}

#[derive(Debug, Clone)]
struct TcnBlock {
    input: Pointwise,
    act1: PRelu,
    norm1: GlobalLayerNorm,
    depthwise: DepthwiseConv1d,
    act2: PRelu,
    norm2: GlobalLayerNorm,
    /// Absent in the final block, whose residual output would be unused.
    residual: Option<Pointwise>,
    skip: Pointwise,
}

impl TcnBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &TcnConfig, dilation: usize, last: bool) -> Result<Self> {
        let (b, h) = (cfg.bottleneck_ch, cfg.conv_ch);
        Ok(Self {
            input: Pointwise::new(ps, &format!("{name}.in"), b, h)?,
            act1: PRelu::new(ps, &format!("{name}.act1"))?,
            norm1: GlobalLayerNorm::new(ps, &format!("{name}.norm1"), h)?,
            depthwise: DepthwiseConv1d::new(ps, &format!("{name}.dw"), h, cfg.kernel, dilation)?,
            act2: PRelu::new(ps, &format!("{name}.act2"))?,
            norm2: GlobalLayerNorm::new(ps, &format!("{name}.norm2"), h)?,
            residual: if last {
                None
            } else {
                Some(Pointwise::new(ps, &format!("{name}.res"), h, b)?)
            },
            skip: Pointwise::new(ps, &format!("{name}.skip"), h, b)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Option<Tensor>, Tensor)> {
        let y = self.norm1.forward(&self.act1.forward(&self.input.forward(x)?)?)?;
        let y = self.norm2.forward(&self.act2.forward(&self.depthwise.forward(&y)?)?)?;
        let res = match &self.residual {
            Some(r) => Some(r.forward(&y)?),
            None => None,
        };
        Ok((res, self.skip.forward(&y)?))
    }
}

/// Temporal convolutional network mapping `[B, N, T]` features to
/// `[B, n_out, T]`.
#[derive(Debug, Clone)]
pub struct Tcn {
    norm: GlobalLayerNorm,
    bottleneck: Pointwise,
    blocks: Vec<TcnBlock>,
    act: PRelu,
    output: Pointwise,
}

impl Tcn {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &TcnConfig, n_in: usize, n_out: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let total = cfg.n_repeats * cfg.n_blocks;
        for r in 0..cfg.n_repeats {
            for x in 0..cfg.n_blocks {
                let i = r * cfg.n_blocks + x;
                blocks.push(TcnBlock::new(ps, &format!("{name}.block{i}"), cfg, 1 << x, i + 1 == total)?);
            }
        }
        Ok(Self {
            norm: GlobalLayerNorm::new(ps, &format!("{name}.norm"), n_in)?,
            bottleneck: Pointwise::new(ps, &format!("{name}.bottleneck"), n_in, cfg.bottleneck_ch)?,
            blocks,
            act: PRelu::new(ps, &format!("{name}.act"))?,
            output: Pointwise::new(ps, &format!("{name}.out"), cfg.bottleneck_ch, n_out)?,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut x = self.bottleneck.forward(&self.norm.forward(features)?)?;
        let mut skips: Option<Tensor> = None;
        for block in &self.blocks {
            let (res, skip) = block.forward(&x)?;
            if let Some(res) = res {
                x = (x + res)?;
            }
            skips = Some(match skips {
                Some(s) => (s + skip)?,
                None => skip,
            });
        }
        let s = skips.expect("at least one block");
        self.output.forward(&self.act.forward(&s)?)
    }
}

#[derive(Debug, Clone)]
enum Codec {
    Stft(TensorStft),
    Learned { encoder: Tensor, decoder: Tensor },
}

/// Conv-TasNet separator. Parameters live in the caller's store under
/// `prefix`.
#[derive(Debug, Clone)]
pub struct ConvTasNet {
    config: BackboneConfig,
    codec: Codec,
    tcn: Tcn,
}

/// Floor on the per-row input level used for scale normalisation.
const LEVEL_FLOOR: f64 = 1e-5;

impl ConvTasNet {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let tcn_cfg = config.effective_tcn();
        let n_src = config.n_sources;
        let (codec, n_feat) = match config.basis {
            Basis::Stft => {
                let s = TensorStft::new(config.stft, ps.dtype(), ps.device())?;
                let n = 2 * s.n_bins();
                (Codec::Stft(s), n)
            }
            Basis::Learnable => {
                let (n, l) = (config.n_filters, config.filter_len);
                let bound = 1.0 / (l as f64).sqrt();
                let encoder = ps.uniform(&format!("{prefix}.encoder"), &[n, 1, l], bound)?;
                let decoder = ps.uniform(&format!("{prefix}.decoder"), &[l, n], 1.0 / (n as f64).sqrt())?;
                (Codec::Learned { encoder, decoder }, n)
            }
        };
        let tcn = Tcn::new(ps, &format!("{prefix}.tcn"), &tcn_cfg, n_feat, n_src * n_feat)?;
        Ok(Self {
            config: config.clone(),
            codec,
            tcn,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[B, L]` mixtures to `[B, n_sources, L]` estimates.
    pub fn forward(&self, mixture: &Tensor) -> Result<Tensor> {
        let (b, len) = mixture.dims2()?;
        if len < self.config.min_len() {
            return Err(medleysep_core::Error::InvalidInput(format!(
                "mixture of {len} samples is shorter than the minimum of {} samples",
                self.config.min_len()
            ))
            .into());
        }
        let n_src = self.config.n_sources;
        // Per-row level normalisation; outputs are scaled back.
        let level = mixture
            .sqr()?
            .mean_keepdim(1)?
            .sqrt()?
            .affine(1.0, LEVEL_FLOOR)?;
        let x = mixture.broadcast_div(&level)?;
        let est = match &self.codec {
            Codec::Stft(s) => {
                let spec = s.forward(&x)?;
                let (_, ch, t) = spec.dims3()?;
                let out = self.tcn.forward(&spec)?.reshape((b * n_src, ch, t))?;
                s.inverse(&out, len)?.reshape((b, n_src, len))?
            }
            Codec::Learned { encoder, decoder } => {
                let l = self.config.filter_len;
                let hop = l / 2;
                let frames = len.saturating_sub(l).div_ceil(hop) + 1;
                let padded_len = (frames - 1) * hop + l;
                let xp = x.pad_with_zeros(1, 0, padded_len - len)?;
                let framed = frame_signal(&xp, l, hop, frames)?;
                let enc = encoder.squeeze(1)?.broadcast_matmul(&framed)?.relu()?;
                let (_, n, t) = enc.dims3()?;
                let masks = sigmoid(&self.tcn.forward(&enc)?)?.reshape((b, n_src, n, t))?;
                let masked = masks.broadcast_mul(&enc.unsqueeze(1)?)?.reshape((b * n_src, n, t))?;
                let framed = decoder.broadcast_matmul(&masked)?;
                overlap_add(&framed, hop)?
                    .narrow(1, 0, len)?
                    .reshape((b, n_src, len))?
            }
        };
        let est = est.broadcast_mul(&level.unsqueeze(1)?)?;
        if self.config.mixture_consistency {
            mixture_consistency(&est, mixture)
        } else {
            Ok(est)
        }
    }
}

/// A small STFT-basis configuration for tests and smoke runs.
pub fn tiny_config(stft: StftConfig) -> BackboneConfig {
    BackboneConfig {
        basis: Basis::Stft,
        tcn: TcnConfig {
            n_blocks: 4,
            n_repeats: 1,
            bottleneck_ch: 32,
            conv_ch: 64,
            kernel: 3,
        },
        stft,
        ..BackboneConfig::default()
    }
}

/// Builds a model in a fresh store; convenient for counting parameters.
pub fn build(config: &BackboneConfig, seed: u64, dtype: DType) -> Result<(ParamStore, ConvTasNet)> {
    let mut ps = ParamStore::new(seed, dtype);
    let m = ConvTasNet::new(&mut ps, "backbone", config)?;
    let _ = Device::Cpu;
    Ok((ps, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_stft() -> StftConfig {
        StftConfig::new(128, 32, 128)
    }

    fn input(b: usize, len: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * len).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Tensor::from_vec(v, (b, len), &Device::Cpu).unwrap()
    }

    #[test]
    fn shapes_and_lengths_for_both_bases() {
        for basis in [Basis::Stft, Basis::Learnable] {
            let cfg = BackboneConfig {
                basis,
                n_filters: 32,
                ..tiny_config(small_stft())
            };
            let (_, m) = build(&cfg, 0, DType::F32).unwrap();
            for len in [1000, 1001, 1537] {
                let y = m.forward(&input(2, len, 1)).unwrap();
                assert_eq!(y.dims(), &[2, 2, len]);
                let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert!(v.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn silence_in_silence_out() {
        let cfg = BackboneConfig {
            mixture_consistency: false,
            ..tiny_config(small_stft())
        };
        let (_, m) = build(&cfg, 0, DType::F32).unwrap();
        let y = m.forward(&Tensor::zeros((1, 800), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let peak = y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(peak < 1e-3, "{peak}");
    }

    #[test]
    fn consistency_and_short_input() {
        let (_, m) = build(&tiny_config(small_stft()), 0, DType::F32).unwrap();
        let x = input(1, 900, 2);
        let y = m.forward(&x).unwrap();
        let err = (y.sum(1).unwrap() - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert!(err.to_scalar::<f32>().unwrap() < 1e-5);
        let err = m.forward(&input(1, 100, 3)).unwrap_err().to_string();
        assert!(err.contains("128"), "{err}");
    }

    #[test]
    fn large_scale_doubles_channels_and_grows_superlinearly() {
        let base = BackboneConfig::default();
        let large = BackboneConfig {
            model_scale: ModelScale::Large,
            ..base.clone()
        };
        let t = large.effective_tcn();
        assert_eq!((t.bottleneck_ch, t.conv_ch), (256, 1024));
        let small = tiny_config(small_stft());
        let (p1, _) = build(&small, 0, DType::F32).unwrap();
        let (p2, _) = build(&BackboneConfig { model_scale: ModelScale::Large, ..small }, 0, DType::F32).unwrap();
        assert!(p2.count() > 2 * p1.count());
    }
}
