//! Layers built from matmuls and shifted slices so every op has a backward
//! pass on the CPU backend.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::ParamStore;

pub const NORM_EPS: f64 = 1e-8;

/// 1x1 convolution over the channel axis of `[B, C, ...]`.
#[derive(Debug, Clone)]
pub struct Pointwise {
    weight: Tensor,
    bias: Tensor,
}

impl Pointwise {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let (weight, bias) = ps.linear(name, c_in, c_out)?;
        Ok(Self { weight, bias })
    }

    /// Weights drawn from `[-scale, scale]`, bias zero.
    pub fn with_scale(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, scale: f64) -> Result<Self> {
        let weight = ps.uniform(&format!("{name}.weight"), &[c_out, c_in], scale)?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (b, c) = (dims[0], dims[1]);
        let rest: usize = dims[2..].iter().product();
        let y = self.weight.broadcast_matmul(&x.reshape((b, c, rest))?)?;
        let y = y.broadcast_add(&self.bias.unsqueeze(1)?)?;
        let mut out_dims = dims;
        out_dims[1] = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

fn channel_view(p: &Tensor, rank: usize) -> Result<Tensor> {
    let c = p.dim(0)?;
    let mut shape = vec![1, c];
    shape.resize(rank, 1);
    Ok(p.reshape(shape)?)
}

/// Global layer norm over channels and time of `[B, C, T]`.
#[derive(Debug, Clone)]
pub struct GlobalLayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl GlobalLayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim((1, 2))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((1, 2))?;
        let normed = centered.broadcast_div(&var.affine(1.0, NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&channel_view(&self.gamma, 3)?)?
            .broadcast_add(&channel_view(&self.beta, 3)?)?)
    }
}

/// Layer norm across channels at every position of `[B, C, ...]`.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl ChannelLayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let rank = x.rank();
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, 1e-6)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&channel_view(&self.gamma, rank)?)?
            .broadcast_add(&channel_view(&self.beta, rank)?)?)
    }
}

/// Parametric ReLU with one shared slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    alpha: Tensor,
}

impl PRelu {
    pub fn new(ps: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            alpha: ps.constant(&format!("{name}.alpha"), &[1], 0.25)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let neg = x.neg()?.relu()?.broadcast_mul(&self.alpha)?;
        Ok((x.relu()? - neg)?)
    }
}

/// Non-causal dilated depthwise convolution over `[B, C, T]` with an odd
/// kernel; output length equals input length.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    dilation: usize,
}

impl DepthwiseConv1d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[channels, kernel], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[channels], bound)?,
            kernel,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, t) = x.dims3()?;
        let half = (self.kernel - 1) / 2 * self.dilation;
        let padded = x.pad_with_zeros(2, half, half)?;
        let mut acc = self.bias.reshape((1, c, 1))?.broadcast_as(x.shape())?.contiguous()?;
        for k in 0..self.kernel {
            let w = self.weight.narrow(1, k, 1)?.reshape((1, c, 1))?;
            let tap = padded.narrow(2, k * self.dilation, t)?;
            acc = (acc + tap.broadcast_mul(&w)?)?;
        }
        Ok(acc)
    }
}

/// Depthwise `k x k` convolution over `[B, C, H, W]` with same padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / kernel as f64;
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[channels, kernel * kernel], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[channels], bound)?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let half = self.kernel / 2;
        let padded = x.pad_with_zeros(2, half, half)?.pad_with_zeros(3, half, half)?;
        let mut acc = self.bias.reshape((1, c, 1, 1))?.broadcast_as(x.shape())?.contiguous()?;
        for i in 0..self.kernel {
            let rows = padded.narrow(2, i, h)?;
            for j in 0..self.kernel {
                let wt = self
                    .weight
                    .narrow(1, i * self.kernel + j, 1)?
                    .reshape((1, c, 1, 1))?;
                acc = (acc + rows.narrow(3, j, w)?.broadcast_mul(&wt)?)?;
            }
        }
        Ok(acc)
    }
}

/// `0.5 * (tanh(x / 2) + 1)`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Mean over the last axis, keeping it.
pub fn mean_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?)
}
