//! Tensor versions of the training objectives. Waveforms are `[B, L]`;
//! every pair loss returns one value per batch row.

use candle_core::{DType, Device, Tensor, D};
use medleysep_core::objectives::{permutations, LossConfig, TimeLoss, LOG_MAG_EPS, MAX_PIT_SOURCES, SNR_TAU};
use medleysep_core::stft::StftConfig;

use crate::dsp::{magnitude, TensorStft};
use crate::error::{Error, Result};

/// Stabiliser for the SI-SDR ratio.
pub const SI_SDR_EPS: f64 = 1e-8;

fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a * b)?.sum(D::Minus1)?)
}

fn db(ratio: &Tensor) -> Result<Tensor> {
    Ok(ratio.log()?.affine(10.0 / std::f64::consts::LN_10, 0.0)?)
}

/// Bounded SNR in dB.
pub fn snr(est: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let energy = reference.sqr()?.sum(D::Minus1)?;
    let err = (reference - est)?.sqr()?.sum(D::Minus1)?;
    let den = (err + energy.affine(SNR_TAU, 0.0)?)?;
    db(&(energy / den)?)
}

/// SI-SDR in dB with a small additive stabiliser.
pub fn si_sdr(est: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let energy = reference.sqr()?.sum_keepdim(D::Minus1)?.affine(1.0, SI_SDR_EPS)?;
    let alpha = (dot(est, reference)?.unsqueeze(D::Minus1)? / energy)?;
    let target = reference.broadcast_mul(&alpha)?;
    let num = target.sqr()?.sum(D::Minus1)?.affine(1.0, SI_SDR_EPS)?;
    let den = (target - est)?.sqr()?.sum(D::Minus1)?.affine(1.0, SI_SDR_EPS)?;
    db(&(num / den)?)
}

/// Sum over resolutions of spectral convergence plus mean log-magnitude L1.
pub fn multi_res_stft_loss(est: &Tensor, reference: &Tensor, stfts: &[TensorStft]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for s in stfts {
        let me = magnitude(&s.forward(est)?)?.flatten_from(1)?;
        let mr = magnitude(&s.forward(reference)?)?.flatten_from(1)?;
        let n = me.dim(1)? as f64;
        let diff = (&mr - &me)?.sqr()?.sum(1)?.sqrt()?;
        let norm = mr.sqr()?.sum(1)?.sqrt()?.affine(1.0, LOG_MAG_EPS)?;
        let sc = (diff / norm)?;
        let log_l1 = (mr.affine(1.0, LOG_MAG_EPS)?.log()? - me.affine(1.0, LOG_MAG_EPS)?.log()?)?
            .abs()?
            .sum(1)?
            .affine(1.0 / n, 0.0)?;
        let term = (sc + log_l1)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::config("multi-resolution loss needs at least one resolution"))
}

/// Sum over resolutions of the mean absolute real/imag coefficient error.
pub fn ri_stft_loss(est: &Tensor, reference: &Tensor, stfts: &[TensorStft]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for s in stfts {
        let d = (s.forward(reference)? - s.forward(est)?)?.abs()?.flatten_from(1)?;
        let n = d.dim(1)? as f64;
        let term = d.sum(1)?.affine(1.0 / n, 0.0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::config("RI loss needs at least one resolution"))
}

/// `[B, N, L]` estimates shifted so they sum to the `[B, L]` mixture.
pub fn mixture_consistency(estimates: &Tensor, mixture: &Tensor) -> Result<Tensor> {
    let n = estimates.dim(1)? as f64;
    let residual = (mixture - estimates.sum(1)?)?.affine(1.0 / n, 0.0)?;
    Ok(estimates.broadcast_add(&residual.unsqueeze(1)?)?)
}

/// The composite pair loss of a [`LossConfig`] with its STFT bases.
#[derive(Debug, Clone)]
pub struct PairLoss {
    config: LossConfig,
    stfts: Vec<TensorStft>,
}

impl PairLoss {
    pub fn new(config: LossConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let stfts = config
            .stft_resolutions
            .iter()
            .map(|r| TensorStft::new(StftConfig::new(r.fft, r.hop, r.win), dtype, device))
            .collect::<Result<_>>()?;
        Ok(Self { config, stfts })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    /// `[B, L]` pairs to `[B]` losses (lower is better).
    pub fn pair(&self, est: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let mut total = est.zeros_like()?.sum(D::Minus1)?;
        if c.time_weight > 0.0 {
            let metric = match c.time_loss {
                TimeLoss::SiSdr => si_sdr(est, reference)?,
                TimeLoss::Snr => snr(est, reference)?,
            };
            total = (total - metric.affine(c.time_weight, 0.0)?)?;
        }
        if c.stft_mag_weight > 0.0 {
            let l = multi_res_stft_loss(est, reference, &self.stfts)?;
            total = (total + l.affine(c.stft_mag_weight, 0.0)?)?;
        }
        if c.stft_ri_weight > 0.0 {
            let l = ri_stft_loss(est, reference, &self.stfts)?;
            total = (total + l.affine(c.stft_ri_weight, 0.0)?)?;
        }
        Ok(total)
    }
}

/// Utterance-level PIT over `[B, N, L]` tensors. Returns the batch-mean
/// loss and, per row, the permutation with `perm[i]` the estimate assigned
/// to reference `i` (ties keep the lexicographically first).
pub fn upit<F>(estimates: &Tensor, references: &Tensor, pair: F) -> Result<(Tensor, Vec<Vec<usize>>)>
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    let (b, n, _) = estimates.dims3()?;
    if references.dims() != estimates.dims() {
        return Err(Error::config(format!(
            "estimates {:?} and references {:?} differ in shape",
            estimates.dims(),
            references.dims()
        )));
    }
    if n == 0 || n > MAX_PIT_SOURCES {
        return Err(Error::config(format!("uPIT supports 1 to {MAX_PIT_SOURCES} sources, got {n}")));
    }
    // cell[r][e]: [B] loss of estimate e against reference r.
    let mut cell = Vec::with_capacity(n);
    for r in 0..n {
        let rt = references.narrow(1, r, 1)?.squeeze(1)?;
        let mut row = Vec::with_capacity(n);
        for e in 0..n {
            row.push(pair(&estimates.narrow(1, e, 1)?.squeeze(1)?, &rt)?);
        }
        cell.push(row);
    }
    let perms = permutations(n);
    let mut per_perm = Vec::with_capacity(perms.len());
    for p in &perms {
        let mut sum = cell[0][p[0]].clone();
        for (r, &e) in p.iter().enumerate().skip(1) {
            sum = (sum + &cell[r][e])?;
        }
        per_perm.push(sum.affine(1.0 / n as f64, 0.0)?);
    }
    let stacked = Tensor::stack(&per_perm, 1)?;
    let values = stacked.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut mask = vec![0.0; b * perms.len()];
    let mut chosen = Vec::with_capacity(b);
    for (row, v) in values.iter().enumerate() {
        let mut best = 0;
        for (j, x) in v.iter().enumerate() {
            if *x < v[best] {
                best = j;
            }
        }
        mask[row * perms.len() + best] = 1.0;
        chosen.push(perms[best].clone());
    }
    let mask = Tensor::from_vec(mask, (b, perms.len()), stacked.device())?.to_dtype(stacked.dtype())?;
    let loss = (stacked * mask)?.sum(1)?.mean(0)?;
    Ok((loss, chosen))
}

/// Fixed main/rest assignment over `[B, 2, L]` tensors: batch mean of the
/// average of the two pair losses.
pub fn orpit<F>(estimates: &Tensor, references: &Tensor, pair: F) -> Result<Tensor>
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    let (_, n, _) = estimates.dims3()?;
    if n != 2 || references.dims() != estimates.dims() {
        return Err(Error::config("OR-PIT expects [B, 2, L] estimates and references"));
    }
    let pick = |t: &Tensor, i: usize| -> Result<Tensor> { Ok(t.narrow(1, i, 1)?.squeeze(1)?) };
    let main = pair(&pick(estimates, 0)?, &pick(references, 0)?)?;
    let rest = pair(&pick(estimates, 1)?, &pick(references, 1)?)?;
    Ok((main + rest)?.affine(0.5, 0.0)?.mean(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use medleysep_core::objectives as core;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn values_match_core_objectives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = rand_vec(2048, &mut rng);
        let e: Vec<f64> = r.iter().map(|v| 0.8 * v + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let (rt, et) = (row(&r), row(&e));
        assert!((scalar(&snr(&et, &rt).unwrap()) - core::snr(&e, &r).unwrap()).abs() < 1e-9);
        assert!((scalar(&si_sdr(&et, &rt).unwrap()) - core::si_sdr(&e, &r).unwrap()).abs() < 1e-6);
        let res = vec![
            core::StftResolution { fft: 256, hop: 64, win: 256 },
            core::StftResolution { fft: 512, hop: 128, win: 512 },
        ];
        let stfts: Vec<TensorStft> = res
            .iter()
            .map(|r| TensorStft::new(r.config(), DType::F64, &Device::Cpu).unwrap())
            .collect();
        let mr = scalar(&multi_res_stft_loss(&et, &rt, &stfts).unwrap());
        assert!((mr - core::multi_res_stft_loss(&e, &r, &res).unwrap()).abs() < 1e-6);
        let ri = scalar(&ri_stft_loss(&et, &rt, &stfts).unwrap());
        assert!((ri - core::ri_stft_loss(&e, &r, &res).unwrap()).abs() < 1e-9);

        let cfg = LossConfig {
            stft_resolutions: res.clone(),
            ..LossConfig::default()
        };
        let pl = PairLoss::new(cfg.clone(), DType::F64, &Device::Cpu).unwrap();
        let v = scalar(&pl.pair(&et, &rt).unwrap());
        assert!((v - cfg.pair_loss(&e, &r).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn pit_matches_core_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..=4 {
            let est: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(64, &mut rng)).collect();
            let refs: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(64, &mut rng)).collect();
            let flat = |v: &[Vec<f64>]| {
                Tensor::from_vec(v.concat(), (1, n, 64), &Device::Cpu).unwrap()
            };
            let (loss, perms) = upit(&flat(&est), &flat(&refs), |a, b| Ok(si_sdr(a, b)?.neg()?)).unwrap();
            let (want, want_perm) =
                core::upit_loss(&est, &refs, |a, b| Ok(-core::si_sdr(a, b)?)).unwrap();
            assert!((scalar(&loss) - want).abs() < 1e-6);
            assert_eq!(perms[0], want_perm);
        }
    }

    #[test]
    fn consistency_sums_to_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let est = Tensor::from_vec(rand_vec(2 * 3 * 50, &mut rng), (2, 3, 50), &Device::Cpu).unwrap();
        let mix = Tensor::from_vec(rand_vec(2 * 50, &mut rng), (2, 50), &Device::Cpu).unwrap();
        let p = mixture_consistency(&est, &mix).unwrap();
        let err = (p.sum(1).unwrap() - &mix).unwrap().abs().unwrap().max_all().unwrap();
        assert!(err.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn orpit_averages_fixed_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_vec(100, &mut rng);
        let b = rand_vec(100, &mut rng);
        let t = Tensor::from_vec([a.clone(), b.clone()].concat(), (1, 2, 100), &Device::Cpu).unwrap();
        let swapped = Tensor::from_vec([b, a].concat(), (1, 2, 100), &Device::Cpu).unwrap();
        let neg_snr = |x: &Tensor, y: &Tensor| Ok(snr(x, y)?.neg()?);
        let good = scalar(&orpit(&t, &t, neg_snr).unwrap());
        let bad = scalar(&orpit(&swapped, &t, neg_snr).unwrap());
        assert!((good + 30.0).abs() < 1e-9);
        assert!(bad > good);
    }
}
