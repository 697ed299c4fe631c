//! Ideal time-frequency masks computed from ground-truth stems.

use rustfft::num_complex::Complex64;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::stft::{istft, ComplexSpectrogram};

/// Denominator floor for the ratio mask.
pub const IRM_EPS: f64 = 1e-8;
/// Mixture magnitude below which the complex ratio mask is zero.
pub const CIRM_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Mask {
    pub fn len(&self) -> usize {
        match self {
            Mask::Real(m) => m.len(),
            Mask::Complex(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Ibm,
    Irm,
    Cirm,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ibm" => Ok(MaskKind::Ibm),
            "irm" => Ok(MaskKind::Irm),
            "cirm" => Ok(MaskKind::Cirm),
            other => Err(Error::invalid(format!(
                "unknown mask kind {other:?}; expected ibm, irm or cirm"
            ))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Ibm => "ibm",
            MaskKind::Irm => "irm",
            MaskKind::Cirm => "cirm",
        })
    }
}

fn check_shapes(specs: &[&ComplexSpectrogram]) -> Result<()> {
    let first = specs
        .first()
        .ok_or_else(|| Error::invalid("at least one spectrogram is required"))?;
    if specs.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::shape("spectrograms differ in frames, config or rate"));
    }
    Ok(())
}

/// Binary masks: 1 where a stem has the largest magnitude, lowest index
/// winning ties. Exactly one mask is 1 at every bin.
pub fn ibm(stems: &[ComplexSpectrogram]) -> Result<Vec<Mask>> {
    check_shapes(&stems.iter().collect::<Vec<_>>())?;
    let cells = stems[0].data().len();
    let mut masks = vec![vec![0.0; cells]; stems.len()];
    for c in 0..cells {
        let mut winner = 0;
        let mut best = stems[0].data()[c].norm();
        for (i, s) in stems.iter().enumerate().skip(1) {
            let m = s.data()[c].norm();
            if m > best {
                best = m;
                winner = i;
            }
        }
        masks[winner][c] = 1.0;
    }
    Ok(masks.into_iter().map(Mask::Real).collect())
}

/// Magnitude-ratio masks `|S_i| / (Σ_j |S_j| + ε)`.
pub fn irm(stems: &[ComplexSpectrogram]) -> Result<Vec<Mask>> {
    check_shapes(&stems.iter().collect::<Vec<_>>())?;
    let cells = stems[0].data().len();
    let total: Vec<f64> = (0..cells)
        .map(|c| stems.iter().map(|s| s.data()[c].norm()).sum::<f64>() + IRM_EPS)
        .collect();
    Ok(stems
        .iter()
        .map(|s| {
            Mask::Real(
                s.data()
                    .iter()
                    .zip(&total)
                    .map(|(v, t)| v.norm() / t)
                    .collect(),
            )
        })
        .collect())
}

/// Unbounded complex ratio `S / X`, zero where `|X| <= δ`.
pub fn cirm(stem: &ComplexSpectrogram, mixture: &ComplexSpectrogram) -> Result<Mask> {
    check_shapes(&[stem, mixture])?;
    Ok(Mask::Complex(
        stem.data()
            .iter()
            .zip(mixture.data())
            .map(|(s, x)| {
                if x.norm() > CIRM_DELTA {
                    s / x
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect(),
    ))
}

/// Masks for every stem of the given kind.
pub fn oracle_masks(
    kind: MaskKind,
    stems: &[ComplexSpectrogram],
    mixture: &ComplexSpectrogram,
) -> Result<Vec<Mask>> {
    match kind {
        MaskKind::Ibm => ibm(stems),
        MaskKind::Irm => irm(stems),
        MaskKind::Cirm => stems.iter().map(|s| cirm(s, mixture)).collect(),
    }
}

/// `iSTFT(mask ⊙ X)` with exactly `out_len` samples.
pub fn apply_mask(mask: &Mask, mixture: &ComplexSpectrogram, out_len: usize) -> Result<AudioBuffer> {
    if mask.len() != mixture.data().len() {
        return Err(Error::shape(format!(
            "mask has {} cells, mixture spectrogram has {}",
            mask.len(),
            mixture.data().len()
        )));
    }
    let masked = match mask {
        Mask::Real(m) => mixture.map(|i, c| c * m[i]),
        Mask::Complex(m) => mixture.map(|i, c| c * m[i]),
    };
    istft(&masked, out_len)
}
