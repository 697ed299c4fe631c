//! A backbone with an optional iSRNet stage, plus inference helpers.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use medleysep_core::eval::Separator;
use medleysep_core::resample::resample;
use medleysep_core::AudioBuffer;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dsp::tensor_buffers;
use crate::error::{Error, Result};
use crate::isrnet::{ISRNet, ISRNetConfig};
use crate::losses::mixture_consistency;
use crate::params::ParamStore;
use crate::tasnet::{BackboneConfig, ConvTasNet};

pub const BACKBONE_PREFIX: &str = "backbone";
pub const ISRNET_PREFIX: &str = "isrnet";

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub sample_rate: u32,
    pub backbone: BackboneConfig,
    pub isrnet: Option<ISRNetConfig>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(i) = &self.isrnet {
            i.validate()?;
            if i.sample_rate != self.sample_rate {
                return Err(Error::config(format!(
                    "iSRNet sample rate {} differs from the model rate {}",
                    i.sample_rate, self.sample_rate
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Outputs {
    /// Backbone estimates `[B, 2, L]`.
    pub initial: Tensor,
    /// iSRNet estimates when the model has that stage.
    pub refined: Option<Tensor>,
}

impl Outputs {
    pub fn last(&self) -> &Tensor {
        self.refined.as_ref().unwrap_or(&self.initial)
    }
}

#[derive(Debug, Clone)]
pub struct SeparationModel {
    spec: ModelSpec,
    ps: ParamStore,
    backbone: ConvTasNet,
    isrnet: Option<ISRNet>,
}

impl SeparationModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut ps = ParamStore::new(seed, DType::F32);
        let backbone = ConvTasNet::new(&mut ps, BACKBONE_PREFIX, &spec.backbone)?;
        let isrnet = match &spec.isrnet {
            Some(c) => Some(ISRNet::new(&mut ps, ISRNET_PREFIX, c, spec.backbone.n_sources)?),
            None => None,
        };
        Ok(Self {
            spec,
            ps,
            backbone,
            isrnet,
        })
    }

    /// Rebuilds the model stored in a checkpoint and loads its weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_value(ck.extra.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::config(format!("checkpoint has no usable model spec: {e}")))?;
        let model = Self::new(spec, 0)?;
        ck.restore_into(&model.ps, &[""])?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn forward(&self, mixture: &Tensor) -> Result<Outputs> {
        let initial = self.backbone.forward(mixture)?;
        let refined = match &self.isrnet {
            Some(net) => {
                let r = net.forward(mixture, &initial)?;
                Some(if self.spec.backbone.mixture_consistency {
                    mixture_consistency(&r, mixture)?
                } else {
                    r
                })
            }
            None => None,
        };
        Ok(Outputs { initial, refined })
    }

    /// Separates one mono buffer, resampling to the model rate and back.
    pub fn separate(&self, mixture: &AudioBuffer) -> Result<Vec<AudioBuffer>> {
        let rate = mixture.sample_rate();
        let x = if rate == self.spec.sample_rate {
            mixture.clone()
        } else {
            resample(mixture, self.spec.sample_rate)?
        };
        let t = Tensor::from_vec(x.samples().to_vec(), (1, x.len()), &Device::Cpu)?.to_dtype(DType::F32)?;
        let out = self.forward(&t)?;
        let est = out.last().squeeze(0)?;
        let mut bufs = tensor_buffers(&est, self.spec.sample_rate)?;
        if rate != self.spec.sample_rate {
            for b in bufs.iter_mut() {
                let r = resample(b, rate)?;
                let mut s = r.samples().to_vec();
                s.resize(mixture.len(), 0.0);
                *b = AudioBuffer::new(s, rate)?;
            }
        }
        Ok(bufs)
    }
}

/// A trained model behind the evaluation harness interface.
#[derive(Debug, Clone)]
pub struct ModelSeparator {
    pub model: SeparationModel,
    pub label: String,
}

impl Separator for ModelSeparator {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn separate(&self, mixture: &AudioBuffer, _references: &[AudioBuffer]) -> medleysep_core::Result<Vec<AudioBuffer>> {
        self.model.separate(mixture).map_err(|e| match e {
            Error::Core(c) => c,
            other => medleysep_core::Error::InvalidInput(other.to_string()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasnet::tiny_config;
    use medleysep_core::stft::StftConfig;

    fn spec(with_isr: bool) -> ModelSpec {
        let stft = StftConfig::new(128, 32, 128);
        ModelSpec {
            sample_rate: 16_000,
            backbone: tiny_config(stft),
            isrnet: with_isr.then(|| ISRNetConfig {
                n_convnext_blocks: 1,
                channels: 4,
                kernel: 3,
                stft,
                sample_rate: 16_000,
                ..ISRNetConfig::default()
            }),
        }
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_outputs() {
        let m = SeparationModel::new(spec(true), 5).unwrap();
        let mut ck = Checkpoint::new("joint", 0, serde_json::Value::Null, serde_json::json!({ "model": m.spec() }));
        ck.insert_store(m.params()).unwrap();
        let back = SeparationModel::from_checkpoint(&ck).unwrap();
        let x = AudioBuffer::new((0..900).map(|i| ((i as f64) * 0.05).sin() * 0.3).collect(), 16_000).unwrap();
        let a = m.separate(&x).unwrap();
        let b = back.separate(&x).unwrap();
        assert_eq!(a, b);
        let sum: Vec<f64> = (0..900).map(|i| a[0].samples()[i] + a[1].samples()[i]).collect();
        for (s, m) in sum.iter().zip(x.samples()) {
            assert!((s - m).abs() < 1e-5);
        }
    }

    #[test]
    fn separates_at_other_rates() {
        let m = SeparationModel::new(spec(false), 1).unwrap();
        let x = AudioBuffer::new(vec![0.1; 4410], 44_100).unwrap();
        let out = m.separate(&x).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|b| b.len() == 4410 && b.sample_rate() == 44_100));
    }

    #[test]
    fn mismatched_isrnet_rate_is_rejected() {
        let mut s = spec(true);
        s.sample_rate = 24_000;
        assert!(SeparationModel::new(s, 0).is_err());
    }
}
