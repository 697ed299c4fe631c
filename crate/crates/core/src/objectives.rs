//! Separation objectives and source-to-output assignment.
//!
//! These are the double-precision reference implementations; the model crate
//! has differentiable tensor versions that are checked against them.

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::stft::{stft, StftConfig};

/// Reporting bound for ratio metrics in dB.
pub const METRIC_CAP_DB: f64 = 200.0;
/// Soft threshold in the bounded SNR; caps it at 30 dB.
pub const SNR_TAU: f64 = 1e-3;
/// Floor inside the log-magnitude STFT distance.
pub const LOG_MAG_EPS: f64 = 1e-7;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!(
            "estimate has {} samples, reference has {}",
            est.len(),
            reference.len()
        )));
    }
    let energy = dot(reference, reference);
    if energy == 0.0 {
        return Err(Error::Undefined("reference is all zeros".into()));
    }
    Ok(energy)
}

fn capped_db(ratio_num: f64, ratio_den: f64) -> f64 {
    if ratio_den == 0.0 {
        return METRIC_CAP_DB;
    }
    if ratio_num == 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (ratio_num / ratio_den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

/// Scale-invariant SDR in dB, clamped to ±[`METRIC_CAP_DB`].
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = check_pair(est, reference)?;
    let alpha = dot(est, reference) / ref_energy;
    let mut target = 0.0;
    let mut residual = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        residual += (t - e) * (t - e);
    }
    Ok(capped_db(target, residual))
}

/// Bounded SNR: `10·log10(|r|² / (|r − e|² + τ|r|²))`, at most 30 dB.
pub fn snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = check_pair(est, reference)?;
    let err: f64 = est.iter().zip(reference).map(|(e, r)| (r - e) * (r - e)).sum();
    Ok(10.0 * (ref_energy / (err + SNR_TAU * ref_energy)).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftResolution {
    pub fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl StftResolution {
    pub fn config(&self) -> StftConfig {
        StftConfig::new(self.fft, self.hop, self.win)
    }
}

pub fn default_resolutions() -> Vec<StftResolution> {
    [(512, 128, 512), (1024, 256, 1024), (2048, 512, 2048)]
        .into_iter()
        .map(|(fft, hop, win)| StftResolution { fft, hop, win })
        .collect()
}

fn spectra(
    est: &[f64],
    reference: &[f64],
    res: &StftResolution,
) -> Result<(crate::stft::ComplexSpectrogram, crate::stft::ComplexSpectrogram)> {
    // The sample rate does not enter the transform; any valid rate will do.
    let e = AudioBuffer::new(est.to_vec(), 1)?;
    let r = AudioBuffer::new(reference.to_vec(), 1)?;
    let cfg = res.config();
    Ok((stft(&e, &cfg)?, stft(&r, &cfg)?))
}

/// Sum over resolutions of spectral convergence plus mean log-magnitude L1.
pub fn multi_res_stft_loss(
    est: &[f64],
    reference: &[f64],
    resolutions: &[StftResolution],
) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape("estimate and reference lengths differ"));
    }
    let mut total = 0.0;
    for res in resolutions {
        let (e, r) = spectra(est, reference, res)?;
        let mut diff = 0.0;
        let mut norm = 0.0;
        let mut log_l1 = 0.0;
        for (ce, cr) in e.data().iter().zip(r.data()) {
            let (me, mr) = (ce.norm(), cr.norm());
            diff += (mr - me) * (mr - me);
            norm += mr * mr;
            log_l1 += ((mr + LOG_MAG_EPS).ln() - (me + LOG_MAG_EPS).ln()).abs();
        }
        total += diff.sqrt() / (norm.sqrt() + LOG_MAG_EPS) + log_l1 / e.data().len() as f64;
    }
    Ok(total)
}

/// Sum over resolutions of the mean absolute difference of real and
/// imaginary STFT coefficients.
pub fn ri_stft_loss(est: &[f64], reference: &[f64], resolutions: &[StftResolution]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape("estimate and reference lengths differ"));
    }
    let mut total = 0.0;
    for res in resolutions {
        let (e, r) = spectra(est, reference, res)?;
        let sum: f64 = e
            .data()
            .iter()
            .zip(r.data())
            .map(|(ce, cr)| (cr.re - ce.re).abs() + (cr.im - ce.im).abs())
            .sum();
        total += sum / (2 * e.data().len()) as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeLoss {
    SiSdr,
    Snr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub time_loss: TimeLoss,
    pub stft_resolutions: Vec<StftResolution>,
    pub stft_mag_weight: f64,
    pub stft_ri_weight: f64,
    pub time_weight: f64,
    pub apply_mixture_consistency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            time_loss: TimeLoss::Snr,
            stft_resolutions: default_resolutions(),
            stft_mag_weight: 0.5,
            stft_ri_weight: 0.5,
            time_weight: 1.0,
            apply_mixture_consistency: true,
        }
    }
}

impl LossConfig {
    /// Negative SI-SDR only, the usual time-domain baseline.
    pub fn si_sdr_only() -> Self {
        Self {
            time_loss: TimeLoss::SiSdr,
            stft_resolutions: Vec::new(),
            stft_mag_weight: 0.0,
            stft_ri_weight: 0.0,
            time_weight: 1.0,
            apply_mixture_consistency: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.time_weight, self.stft_mag_weight, self.stft_ri_weight];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("loss weights must be non-negative and finite"));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if (self.stft_mag_weight > 0.0 || self.stft_ri_weight > 0.0)
            && self.stft_resolutions.is_empty()
        {
            return Err(Error::config("STFT loss weights need at least one resolution"));
        }
        for r in &self.stft_resolutions {
            r.config().validate()?;
        }
        Ok(())
    }

    /// Composite per-pair loss: weighted negative time metric plus the two
    /// STFT distances.
    pub fn pair_loss(&self, est: &[f64], reference: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        if self.time_weight > 0.0 {
            let metric = match self.time_loss {
                TimeLoss::SiSdr => si_sdr(est, reference)?,
                TimeLoss::Snr => snr(est, reference)?,
            };
            total -= self.time_weight * metric;
        }
        if self.stft_mag_weight > 0.0 {
            total += self.stft_mag_weight
                * multi_res_stft_loss(est, reference, &self.stft_resolutions)?;
        }
        if self.stft_ri_weight > 0.0 {
            total += self.stft_ri_weight * ri_stft_loss(est, reference, &self.stft_resolutions)?;
        }
        Ok(total)
    }
}

/// Shifts every estimate by an equal share of the mixture residual so the
/// estimates sum to the mixture.
pub fn mixture_consistency(estimates: &[AudioBuffer], mixture: &AudioBuffer) -> Result<Vec<AudioBuffer>> {
    if estimates.is_empty() {
        return Err(Error::invalid("mixture consistency needs at least one estimate"));
    }
    if estimates.iter().any(|e| e.len() != mixture.len()) {
        return Err(Error::shape("estimates and mixture lengths differ"));
    }
    let n = estimates.len() as f64;
    let residual: Vec<f64> = (0..mixture.len())
        .map(|i| {
            let s: f64 = estimates.iter().map(|e| e.samples()[i]).sum();
            (mixture.samples()[i] - s) / n
        })
        .collect();
    estimates
        .iter()
        .map(|e| {
            let s = e.samples().iter().zip(&residual).map(|(v, r)| v + r).collect();
            AudioBuffer::new(s, e.sample_rate())
        })
        .collect()
}

/// Lexicographically ordered permutations of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = (0..n).collect::<Vec<_>>();
    loop {
        out.push(current.clone());
        // Next permutation in lexicographic order.
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}

/// Maximum number of sources for exhaustive assignment search.
pub const MAX_PIT_SOURCES: usize = 4;

/// Minimum over permutations of the mean pair loss. `perm[i]` is the
/// estimate assigned to reference `i`; ties keep the lexicographically
/// first permutation.
pub fn upit_loss<T, F>(estimates: &[T], references: &[T], base_loss: F) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&T, &T) -> Result<f64>,
{
    let n = references.len();
    if estimates.len() != n {
        return Err(Error::shape(format!(
            "{} estimates for {n} references",
            estimates.len()
        )));
    }
    if n == 0 || n > MAX_PIT_SOURCES {
        return Err(Error::invalid(format!(
            "uPIT supports 1 to {MAX_PIT_SOURCES} sources, got {n}"
        )));
    }
    let mut pair = vec![vec![0.0; n]; n];
    for (r, row) in pair.iter_mut().enumerate() {
        for (e, cell) in row.iter_mut().enumerate() {
            *cell = base_loss(&estimates[e], &references[r])?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let mut sum = 0.0;
        for (r, &e) in perm.iter().enumerate() {
            sum += pair[r][e];
        }
        let loss = sum / n as f64;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, perm));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Fixed main/rest assignment: mean of the two pair losses.
pub fn orpit_loss<T, F>(est_main: &T, est_rest: &T, ref_main: &T, ref_rest_sum: &T, base_loss: F) -> Result<f64>
where
    F: Fn(&T, &T) -> Result<f64>,
{
    Ok((base_loss(est_main, ref_main)? + base_loss(est_rest, ref_rest_sum)?) / 2.0)
}
