//! Mono waveform container, RMS loudness, and WAV I/O.
//!
//! Samples are held as `f64` so that metric and projection arithmetic does
//! not accumulate single-precision rounding. WAV files store either 16-bit
//! PCM or IEEE float32; reading a float32 file and writing it back is exact.

use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rates accepted by the separation pipeline entry points.
pub const PIPELINE_RATES: [u32; 3] = [16_000, 24_000, 44_100];

/// Additive floor inside the loudness logarithm.
pub const LOUDNESS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting empty or non-finite data and a zero rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio buffer must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite sample {} at index {i}",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn from_f32(samples: &[f32], sample_rate: u32) -> Result<Self> {
        Self::new(samples.iter().map(|&v| v as f64).collect(), sample_rate)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false for a constructed buffer; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// Returns a copy multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Copy of `[start, start + len)`; fails if the range is out of bounds or empty.
    pub fn slice(&self, start: usize, len: usize) -> Result<AudioBuffer> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Ok(AudioBuffer {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_to_len(&self, len: usize) -> Result<AudioBuffer> {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        AudioBuffer::new(samples, self.sample_rate)
    }

    pub fn require_pipeline_rate(&self) -> Result<()> {
        if PIPELINE_RATES.contains(&self.sample_rate) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "sample rate {} Hz is not one of the pipeline rates {:?}",
                self.sample_rate, PIPELINE_RATES
            )))
        }
    }
}

/// Sample-wise sum of equally long, equally sampled buffers, accumulated in
/// slice order.
pub fn sum_buffers(buffers: &[AudioBuffer]) -> Result<AudioBuffer> {
    let first = buffers
        .first()
        .ok_or_else(|| Error::invalid("cannot sum an empty list of buffers"))?;
    let mut acc = first.samples.clone();
    for b in &buffers[1..] {
        if b.len() != first.len() || b.sample_rate != first.sample_rate {
            return Err(Error::shape(format!(
                "cannot sum buffers of {} samples @ {} Hz and {} samples @ {} Hz",
                first.len(),
                first.sample_rate,
                b.len(),
                b.sample_rate
            )));
        }
        for (a, v) in acc.iter_mut().zip(&b.samples) {
            *a += v;
        }
    }
    AudioBuffer::new(acc, first.sample_rate)
}

/// RMS level in dB: `20·log10(rms + 1e-12)`.
pub fn loudness(x: &AudioBuffer) -> f64 {
    loudness_of(x.samples())
}

pub fn loudness_of(samples: &[f64]) -> f64 {
    let n = samples.len().max(1) as f64;
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    20.0 * (rms + LOUDNESS_EPS).log10()
}

pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Nearest of the 65536 PCM16 levels after clamping to `[-1, 1)`.
pub fn quantize_pcm16(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn wav_spec(format: WavFormat, sample_rate: u32) -> hound::WavSpec {
    match format {
        WavFormat::Pcm16 => hound::WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        },
        WavFormat::Float32 => hound::WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        },
    }
}

fn encode<W: Write + Seek>(writer: W, x: &AudioBuffer, format: WavFormat) -> hound::Result<()> {
    let mut w = hound::WavWriter::new(writer, wav_spec(format, x.sample_rate))?;
    match format {
        WavFormat::Pcm16 => {
            for &v in x.samples() {
                w.write_sample(quantize_pcm16(v))?;
            }
        }
        WavFormat::Float32 => {
            for &v in x.samples() {
                w.write_sample(v as f32)?;
            }
        }
    }
    w.finalize()
}

fn decode<R: Read>(reader: hound::WavReader<R>) -> std::result::Result<(Vec<f64>, u32), String> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format!("expected mono audio, found {} channels", spec.channels));
    }
    let samples: std::result::Result<Vec<f64>, hound::Error> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(format!("unsupported float width {}", spec.bits_per_sample));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect()
        }
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect()
        }
    };
    samples
        .map(|s| (s, spec.sample_rate))
        .map_err(|e| e.to_string())
}

pub fn write_wav(path: impl AsRef<Path>, x: &AudioBuffer, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    encode(std::io::BufWriter::new(file), x, format).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| match source {
        hound::Error::IoError(e) => Error::io(path, e),
        source => Error::Wav {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let (samples, rate) = decode(reader).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    })?;
    AudioBuffer::new(samples, rate)
}

/// Encodes to WAV bytes in memory and decodes again, yielding exactly what a
/// save-and-load through a file of the given format would produce.
pub fn wav_round_trip(x: &AudioBuffer, format: WavFormat) -> Result<AudioBuffer> {
    let mut bytes = Cursor::new(Vec::new());
    encode(&mut bytes, x, format).map_err(|source| Error::Wav {
        path: "<memory>".into(),
        source,
    })?;
    bytes.set_position(0);
    let reader = hound::WavReader::new(bytes).map_err(|source| Error::Wav {
        path: "<memory>".into(),
        source,
    })?;
    let (samples, rate) = decode(reader).map_err(Error::invalid)?;
    AudioBuffer::new(samples, rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(len: usize) -> AudioBuffer {
        let s = (0..len).map(|i| if (i / 10) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        AudioBuffer::new(s, 16_000).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(AudioBuffer::new(vec![], 16_000).is_err());
        assert!(AudioBuffer::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(AudioBuffer::new(vec![0.0, f64::INFINITY], 16_000).is_err());
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn full_scale_square_is_zero_db() {
        assert!(loudness(&square(1000)).abs() < 1e-9);
    }

    #[test]
    fn halving_drops_six_db() {
        let x = square(1000);
        let d = loudness(&x) - loudness(&x.scaled(0.5));
        assert!((d - 6.0206).abs() < 0.01, "{d}");
    }

    #[test]
    fn silence_hits_the_floor() {
        let x = AudioBuffer::silence(100, 16_000).unwrap();
        assert!(loudness(&x) <= -200.0);
    }

    #[test]
    fn pcm16_quantization_bound() {
        let s: Vec<f64> = (0..4000).map(|i| 0.9 * (i as f64 * 0.0137).sin()).collect();
        let x = AudioBuffer::new(s, 24_000).unwrap();
        let y = wav_round_trip(&x, WavFormat::Pcm16).unwrap();
        let max_err = x
            .samples()
            .iter()
            .zip(y.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 2f64.powi(-15), "{max_err}");
    }

    #[test]
    fn pcm16_clamps_instead_of_wrapping() {
        assert_eq!(quantize_pcm16(4.0), i16::MAX);
        assert_eq!(quantize_pcm16(-4.0), i16::MIN);
        assert_eq!(quantize_pcm16(1.0), i16::MAX);
        assert_eq!(quantize_pcm16(0.0), 0);
    }

    #[test]
    fn float32_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let s: Vec<f64> = (0..777).map(|i| (((i as f32) * 0.731).sin() * 3.5) as f64).collect();
        let x = AudioBuffer::new(s, 44_100).unwrap();
        write_wav(&path, &x, WavFormat::Float32).unwrap();
        let y = read_wav(&path).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_wav("/definitely/not/here.wav").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.wav"));
    }

    #[test]
    fn sum_requires_matching_shapes() {
        let a = AudioBuffer::new(vec![1.0, 2.0], 16_000).unwrap();
        let b = AudioBuffer::new(vec![1.0], 16_000).unwrap();
        assert!(sum_buffers(&[a.clone(), b]).is_err());
        let s = sum_buffers(&[a.clone(), a]).unwrap();
        assert_eq!(s.samples(), &[2.0, 4.0]);
    }
}
