//! BSS-eval SDR with a time-invariant distortion filter, and improvements.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::objectives::{si_sdr, METRIC_CAP_DB};

pub const DEFAULT_FILTER_TAPS: usize = 512;
const RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssSdr {
    pub sdr: f64,
    pub taps_used: usize,
    /// The normal equations were singular and solved with a ridge term.
    pub regularized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub taps_used: usize,
    pub regularized: bool,
}

fn db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return METRIC_CAP_DB;
    }
    if num <= 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

struct Spectra {
    nfft: usize,
    refs: Vec<Vec<Complex64>>,
    est: Vec<Complex64>,
}

fn forward(planner: &mut FftPlanner<f64>, x: &[f64], nfft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    planner.plan_fft_forward(nfft).process(&mut buf);
    buf
}

fn inverse(planner: &mut FftPlanner<f64>, mut buf: Vec<Complex64>) -> Vec<f64> {
    let n = buf.len();
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

/// Least-squares projection of `est` (zero-padded by `taps - 1`) onto the
/// span of `taps` delayed copies of each selected reference.
fn project(
    planner: &mut FftPlanner<f64>,
    spectra: &Spectra,
    select: &[usize],
    taps: usize,
    out_len: usize,
) -> (Vec<f64>, bool) {
    let nfft = spectra.nfft;
    let k = select.len();
    let size = k * taps;
    // Cross-correlation xc(d) = Σ_m a[m] b[m + d], read at lag d (negative
    // lags wrap around the end).
    let lag = |xc: &[f64], d: isize| -> f64 {
        if d >= 0 {
            xc[d as usize]
        } else {
            xc[(nfft as isize + d) as usize]
        }
    };
    let mut g = DMatrix::<f64>::zeros(size, size);
    for (a, &i) in select.iter().enumerate() {
        for (b, &j) in select.iter().enumerate().skip(a) {
            let prod: Vec<Complex64> = spectra.refs[i]
                .iter()
                .zip(&spectra.refs[j])
                .map(|(x, y)| x.conj() * y)
                .collect();
            let xc = inverse(planner, prod);
            for p in 0..taps {
                for q in 0..taps {
                    let v = lag(&xc, p as isize - q as isize);
                    g[(a * taps + p, b * taps + q)] = v;
                    g[(b * taps + q, a * taps + p)] = v;
                }
            }
        }
    }
    let mut rhs = DVector::<f64>::zeros(size);
    for (a, &i) in select.iter().enumerate() {
        let prod: Vec<Complex64> = spectra.refs[i]
            .iter()
            .zip(&spectra.est)
            .map(|(x, y)| x.conj() * y)
            .collect();
        let xc = inverse(planner, prod);
        for p in 0..taps {
            rhs[a * taps + p] = xc[p];
        }
    }

    let (coef, regularized) = match g.clone().cholesky() {
        Some(ch) => (ch.solve(&rhs), false),
        None => {
            let scale = (g.trace() / size as f64).max(f64::MIN_POSITIVE);
            let ridged = g + DMatrix::<f64>::identity(size, size) * (RIDGE * scale);
            let sol = match ridged.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => ridged
                    .svd(true, true)
                    .solve(&rhs, 1e-12)
                    .unwrap_or_else(|_| DVector::zeros(size)),
            };
            (sol, true)
        }
    };

    let mut acc = vec![Complex64::new(0.0, 0.0); nfft];
    for (a, &i) in select.iter().enumerate() {
        let h: Vec<f64> = (0..taps).map(|p| coef[a * taps + p]).collect();
        let hf = forward(planner, &h, nfft);
        for ((slot, x), y) in acc.iter_mut().zip(&hf).zip(&spectra.refs[i]) {
            *slot += x * y;
        }
    }
    let mut proj = inverse(planner, acc);
    proj.truncate(out_len);
    (proj, regularized)
}

fn prepare(est: &[f64], refs: &[&[f64]], taps: usize) -> Result<(Spectra, usize, usize, FftPlanner<f64>)> {
    if refs.is_empty() {
        return Err(Error::invalid("at least one reference is required"));
    }
    let n = est.len();
    if refs.iter().any(|r| r.len() != n) {
        return Err(Error::shape("estimate and references must share a length"));
    }
    if taps == 0 {
        return Err(Error::invalid("filter taps must be positive"));
    }
    let taps_used = taps.min(n);
    let out_len = n + taps_used - 1;
    let nfft = (out_len + 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let spectra = Spectra {
        nfft,
        refs: refs.iter().map(|r| forward(&mut planner, r, nfft)).collect(),
        est: forward(&mut planner, est, nfft),
    };
    Ok((spectra, taps_used, out_len, planner))
}

/// SDR of `est` for reference `target`. The target component is the
/// projection of the estimate onto `taps` delayed copies of the target;
/// everything else counts as distortion. Inputs shorter than `taps` use as
/// many taps as they have samples.
pub fn bss_sdr(est: &[f64], refs: &[&[f64]], target: usize, taps: usize) -> Result<BssSdr> {
    if target >= refs.len() {
        return Err(Error::invalid(format!(
            "target index {target} out of range for {} references",
            refs.len()
        )));
    }
    let (spectra, taps_used, out_len, mut planner) = prepare(est, refs, taps)?;
    let (s_target, regularized) = project(&mut planner, &spectra, &[target], taps_used, out_len);
    let mut e_total = 0.0;
    let mut s_energy = 0.0;
    for (i, s) in s_target.iter().enumerate() {
        let e = est.get(i).copied().unwrap_or(0.0);
        e_total += (e - s) * (e - s);
        s_energy += s * s;
    }
    Ok(BssSdr {
        sdr: db(s_energy, e_total),
        taps_used,
        regularized,
    })
}

/// Full decomposition: target, interference, and artifact terms.
pub fn bss_eval(est: &[f64], refs: &[&[f64]], target: usize, taps: usize) -> Result<BssScores> {
    if target >= refs.len() {
        return Err(Error::invalid("target index out of range"));
    }
    let (spectra, taps_used, out_len, mut planner) = prepare(est, refs, taps)?;
    let (s_target, reg_a) = project(&mut planner, &spectra, &[target], taps_used, out_len);
    let all: Vec<usize> = (0..refs.len()).collect();
    let (s_all, reg_b) = project(&mut planner, &spectra, &all, taps_used, out_len);
    let (mut st, mut interf, mut artif, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..out_len {
        let e = est.get(i).copied().unwrap_or(0.0);
        st += s_target[i] * s_target[i];
        interf += (s_all[i] - s_target[i]).powi(2);
        artif += (e - s_all[i]).powi(2);
        total += (e - s_target[i]).powi(2);
    }
    Ok(BssScores {
        sdr: db(st, total),
        sir: db(st, interf),
        sar: db(st + interf, artif),
        taps_used,
        regularized: reg_a || reg_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Sdr { taps: usize },
    SiSdr,
}

impl Metric {
    pub fn score(&self, est: &AudioBuffer, refs: &[AudioBuffer], idx: usize) -> Result<f64> {
        let target = refs
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("reference index {idx} out of range")))?;
        match *self {
            Metric::SiSdr => si_sdr(est.samples(), target.samples()),
            Metric::Sdr { taps } => {
                let r: Vec<&[f64]> = refs.iter().map(|r| r.samples()).collect();
                Ok(bss_sdr(est.samples(), &r, idx, taps)?.sdr)
            }
        }
    }
}

/// Metric of the estimate minus the metric of the unprocessed mixture.
pub fn improvement(
    metric: Metric,
    est: &AudioBuffer,
    refs: &[AudioBuffer],
    mixture: &AudioBuffer,
    idx: usize,
) -> Result<f64> {
    Ok(metric.score(est, refs, idx)? - metric.score(mixture, refs, idx)?)
}
