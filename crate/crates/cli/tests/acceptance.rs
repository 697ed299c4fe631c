//! Acceptance checks, one line per criterion. Criterion 9 needs MedleyVox
//! audio: set `MEDLEYVOX_METADATA` to its metadata file, otherwise it is
//! reported as skipped.

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use common::{code, medleysep, stderr, write_json};
use medleysep_core::audio::{wav_round_trip, AudioBuffer, WavFormat};
use medleysep_core::corpus::load_medleyvox_metadata;
use medleysep_core::eval::{evaluate_dataset, EvalOptions, OracleSeparator};
use medleysep_core::heuristic::heuristic_stft;
use medleysep_core::masks::{apply_mask, oracle_masks, MaskKind};
use medleysep_core::objectives::{self, si_sdr, snr, upit_loss, LossConfig, SNR_TAU};
use medleysep_core::stft::{stft, ComplexSpectrogram, StftConfig};
use medleysep_nn::checkpoint::Checkpoint;
use medleysep_nn::data::Batch;
use medleysep_nn::dsp::TensorStft;
use medleysep_nn::isrnet::{size_comparison, ISRNetConfig};
use medleysep_nn::losses;
use medleysep_nn::model::SeparationModel;
use medleysep_nn::optim::OptimConfig;
use medleysep_nn::tasnet::tiny_config;
use medleysep_nn::toy::toy_duets;
use medleysep_nn::train::{batch_si_sdr_i, JointConfig, ToyData, TrainConfig, ValidationConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn buf(x: Vec<f64>, rate: u32) -> AudioBuffer {
    AudioBuffer::new(x, rate).unwrap()
}

fn mixture_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_idem) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(2..=4);
        let len = rng.gen_range(100..2000);
        let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
        let est: Vec<AudioBuffer> = (0..n).map(|_| buf(noise(&mut rng, len).iter().map(|v| v * scale).collect(), 16_000)).collect();
        let mix = buf(noise(&mut rng, len), 16_000);
        let p = objectives::mixture_consistency(&est, &mix).unwrap();
        let peak = mix.peak().max(1e-12);
        for i in 0..len {
            let s: f64 = p.iter().map(|e| e.samples()[i]).sum();
            worst_sum = worst_sum.max((s - mix.samples()[i]).abs() / peak);
        }
        let pp = objectives::mixture_consistency(&p, &mix).unwrap();
        for (a, b) in p.iter().zip(&pp) {
            for (x, y) in a.samples().iter().zip(b.samples()) {
                worst_idem = worst_idem.max((x - y).abs() / peak);
            }
        }
    }
    ensure(worst_sum < 1e-6, format!("sum error {worst_sum:.1e}"))?;
    ensure(worst_idem < 1e-7, format!("reapplication change {worst_idem:.1e}"))?;
    Ok(format!("max sum error {worst_sum:.1e}, reapplication change {worst_idem:.1e}"))
}

/// Relative error between autograd and central differences of `f` at `x0`.
fn fd_error(x0: &[f64], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu).unwrap();
    let var = Var::from_tensor(&t(x0)).unwrap();
    let g = f(var.as_tensor()).backward().unwrap();
    let g = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut num, mut den) = (0.0, 0.0);
    let h = 1e-5;
    for _ in 0..24 {
        let i = rng.gen_range(0..x0.len());
        let at = |d: f64| {
            let mut x = x0.to_vec();
            x[i] += d;
            f(&t(&x)).to_scalar::<f64>().unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        num += (fd - g[i]).powi(2);
        den += fd.powi(2).max(g[i].powi(2));
    }
    (num / den.max(1e-30)).sqrt()
}

fn loss_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = noise(&mut rng, 1024);
    let e: Vec<f64> = r.iter().zip(noise(&mut rng, 1024)).map(|(a, b)| a + 0.3 * b).collect();
    let base = si_sdr(&e, &r).unwrap();
    let drift = [0.1, 1.0, 10.0]
        .iter()
        .map(|g| (si_sdr(&e.iter().map(|v| v * g).collect::<Vec<_>>(), &r).unwrap() - base).abs())
        .fold(0.0, f64::max);
    ensure(drift < 1e-4, format!("scale drift {drift}"))?;
    let double: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    let s2 = snr(&double, &r).unwrap();
    ensure(s2.abs() <= 0.01, format!("snr(2 ref, ref) = {s2}"))?;
    // exactly orthogonal, equal energy: cosine and sine over whole periods
    let c: Vec<f64> = (0..1024).map(|i| (2.0 * PI * 8.0 * i as f64 / 1024.0).cos()).collect();
    let s: Vec<f64> = (0..1024).map(|i| (2.0 * PI * 8.0 * i as f64 / 1024.0).sin()).collect();
    let est: Vec<f64> = c.iter().zip(&s).map(|(a, b)| a + b).collect();
    let (o1, o2) = (si_sdr(&est, &c).unwrap(), snr(&est, &c).unwrap());
    // the bounded SNR sits 10 log10(1 / (1 + tau)) below 0 dB whenever the error equals the reference
    let floor = 10.0 * (1.0 / (1.0 + SNR_TAU)).log10();
    ensure(o1.abs() <= 1e-3 && (o2 - floor).abs() <= 1e-3, format!("orthogonal case si_sdr {o1}, snr {o2}"))?;

    let rt = Tensor::from_vec(r.clone(), (1, 1024), &Device::Cpu).unwrap();
    let stfts: Vec<TensorStft> = [StftConfig::new(256, 64, 256), StftConfig::new(128, 32, 128)]
        .into_iter()
        .map(|c| TensorStft::new(c, DType::F64, &Device::Cpu).unwrap())
        .collect();
    let checks = [
        ("snr", fd_error(&e, |x| losses::snr(x, &rt).unwrap().sum_all().unwrap())),
        ("si_sdr", fd_error(&e, |x| losses::si_sdr(x, &rt).unwrap().sum_all().unwrap())),
        ("multi_res_stft", fd_error(&e, |x| losses::multi_res_stft_loss(x, &rt, &stfts).unwrap().sum_all().unwrap())),
    ];
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    ensure(worst < 1e-3, format!("gradient errors {checks:?}"))?;
    Ok(format!("scale drift {drift:.1e} dB, snr(2r,r) {s2:.4} dB, orthogonal si_sdr {o1:.1e} dB, snr {o2:.4} dB, worst gradient error {worst:.1e}"))
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn go(n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for k in 0..n {
            if !cur.contains(&k) {
                cur.push(k);
                go(n, cur, out);
                cur.pop();
            }
        }
    }
    go(n, &mut cur, &mut out);
    out.sort();
    out
}

fn pit_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for k in 0..200 {
        let n = [2, 3, 4][k % 3];
        let refs: Vec<Vec<f64>> = (0..n).map(|_| noise(&mut rng, 256)).collect();
        let mut est: Vec<Vec<f64>> = refs
            .iter()
            .map(|r| r.iter().zip(noise(&mut rng, 256)).map(|(a, b)| a + rng.gen_range(0.1..2.0) * b).collect())
            .collect();
        est.shuffle(&mut rng);
        if k % 10 == 0 {
            // exact ties
            est[1] = est[0].clone();
        }
        let loss = |e: &Vec<f64>, r: &Vec<f64>| si_sdr(e, r).map(|v| -v);
        let (value, perm) = upit_loss(&est, &refs, loss).unwrap();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in all_permutations(n) {
            let mut sum = 0.0;
            for (r, &e) in p.iter().enumerate() {
                sum += loss(&est[e], &refs[r]).unwrap();
            }
            let v = sum / n as f64;
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, p));
            }
        }
        let (bv, bp) = best.unwrap();
        ensure(value == bv && perm == bp, format!("instance {k}: {value} {perm:?} vs {bv} {bp:?}"))?;
        checked += 1;
    }
    Ok(format!("{checked} instances, exact value and permutation"))
}

fn masked_si_sdrs(kind: MaskKind, stems: &[AudioBuffer], cfg: &StftConfig) -> Vec<f64> {
    let len = stems[0].len();
    let mix: Vec<f64> = (0..len).map(|i| stems.iter().map(|s| s.samples()[i]).sum()).collect();
    let mix = buf(mix, stems[0].sample_rate());
    let xs = stft(&mix, cfg).unwrap();
    let ss: Vec<ComplexSpectrogram> = stems.iter().map(|s| stft(s, cfg).unwrap()).collect();
    oracle_masks(kind, &ss, &xs)
        .unwrap()
        .iter()
        .zip(stems)
        .map(|(m, s)| si_sdr(apply_mask(m, &xs, len).unwrap().samples(), s.samples()).unwrap())
        .collect()
}

/// Sum of bin-centred sines over `bins`, faded in and out.
fn sine_cluster(rng: &mut ChaCha8Rng, bins: std::ops::Range<usize>, cfg: &StftConfig, rate: u32, len: usize) -> AudioBuffer {
    let comps: Vec<(f64, f64, f64)> = bins
        .map(|k| (k as f64 * rate as f64 / cfg.fft_size as f64, rng.gen_range(0.2..1.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let fade = cfg.fft_size;
    let x = (0..len)
        .map(|i| {
            let env = 0.5 - 0.5 * (PI * (i.min(len - 1 - i).min(fade) as f64 / fade as f64)).cos();
            0.02 * env * comps.iter().map(|(f, a, p)| a * (2.0 * PI * f * i as f64 / rate as f64 + p).sin()).sum::<f64>()
        })
        .collect();
    buf(x, rate)
}

fn oracle_ladder() -> Outcome {
    let rate = 24_000;
    let cfg = StftConfig::new(1024, 256, 1024);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut min_bin, mut min_c) = (f64::INFINITY, f64::INFINITY);
    for k in 0..4 {
        let lo = 10 + 5 * k;
        let stems = vec![
            sine_cluster(&mut rng, lo..lo + 20, &cfg, rate, rate as usize),
            sine_cluster(&mut rng, lo + 60..lo + 90, &cfg, rate, rate as usize),
        ];
        let ibm = masked_si_sdrs(MaskKind::Ibm, &stems, &cfg);
        let irm = masked_si_sdrs(MaskKind::Irm, &stems, &cfg);
        let cirm = masked_si_sdrs(MaskKind::Cirm, &stems, &cfg);
        for i in 0..2 {
            ensure(ibm[i] >= 30.0 && irm[i] >= 30.0, format!("disjoint duet {k}: IBM {:.1} IRM {:.1}", ibm[i], irm[i]))?;
            ensure(cirm[i] >= ibm[i] && cirm[i] >= irm[i], format!("ordering broken on duet {k}"))?;
            min_bin = min_bin.min(ibm[i].min(irm[i]));
            min_c = min_c.min(cirm[i]);
        }
    }
    for k in 0..4 {
        let stems: Vec<AudioBuffer> = (0..2).map(|_| buf(noise(&mut rng, 12_000).iter().map(|v| v * 0.3).collect(), rate)).collect();
        let ibm = masked_si_sdrs(MaskKind::Ibm, &stems, &cfg);
        let irm = masked_si_sdrs(MaskKind::Irm, &stems, &cfg);
        let cirm = masked_si_sdrs(MaskKind::Cirm, &stems, &cfg);
        for i in 0..2 {
            ensure(cirm[i] >= 50.0, format!("random mixture {k}: cIRM {:.1}", cirm[i]))?;
            ensure(cirm[i] >= ibm[i] && cirm[i] >= irm[i], format!("ordering broken on random mixture {k}"))?;
            min_c = min_c.min(cirm[i]);
        }
    }
    Ok(format!("IBM/IRM >= {min_bin:.1} dB on disjoint duets, cIRM >= {min_c:.1} dB, ordering holds"))
}

fn si_sdr_i(est: &[AudioBuffer], refs: &[AudioBuffer], mix: &AudioBuffer) -> f64 {
    est.iter()
        .zip(refs)
        .map(|(e, r)| si_sdr(e.samples(), r.samples()).unwrap() - si_sdr(mix.samples(), r.samples()).unwrap())
        .sum::<f64>()
        / refs.len() as f64
}

fn clipping_regression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut min_loss, mut max_keep) = (f64::INFINITY, 0.0f64);
    for ex in toy_duets(4, 1.0, 24_000, 5).unwrap() {
        let len = ex.mixture.len();
        let noisy: Vec<AudioBuffer> = ex
            .sources
            .iter()
            .map(|s| buf(s.samples().iter().zip(noise(&mut rng, len)).map(|(a, b)| a + 0.01 * b).collect(), 24_000))
            .collect();
        let peak = noisy.iter().map(|b| b.peak()).fold(0.0, f64::max);
        let loud: Vec<AudioBuffer> = noisy.iter().map(|b| b.scaled(4.0 / peak)).collect();
        let round = |v: &[AudioBuffer]| v.iter().map(|b| wav_round_trip(b, WavFormat::Pcm16).unwrap()).collect::<Vec<_>>();
        let loss = si_sdr_i(&loud, &ex.sources, &ex.mixture) - si_sdr_i(&round(&loud), &ex.sources, &ex.mixture);
        let consistent = objectives::mixture_consistency(&noisy, &ex.mixture).unwrap();
        let keep = si_sdr_i(&consistent, &ex.sources, &ex.mixture) - si_sdr_i(&round(&consistent), &ex.sources, &ex.mixture);
        min_loss = min_loss.min(loss);
        max_keep = max_keep.max(keep.abs());
    }
    ensure(min_loss > 5.0, format!("peak-4 estimates lose only {min_loss:.2} dB"))?;
    ensure(max_keep < 0.1, format!("consistent estimates lose {max_keep:.3} dB"))?;
    Ok(format!("peak-4 estimates lose >= {min_loss:.1} dB, mixture-consistent lose <= {max_keep:.4} dB"))
}

fn isrnet_size() -> Outcome {
    let (small, large) = size_comparison(&ISRNetConfig::default(), 2).map_err(|e| e.to_string())?;
    ensure((120_000..=200_000).contains(&small), format!("iSRNet has {small} parameters"))?;
    let ratio = large as f64 / small as f64;
    ensure(ratio >= 30.0, format!("ratio {ratio:.1}"))?;
    Ok(format!("iSRNet {small} parameters, SRNet-style stack {large} ({ratio:.1}x)"))
}

fn heuristic_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = StftConfig::new(64, 16, 64);
    let bins = cfg.n_bins();
    let frames = 12;
    let boundary = 10;
    let spec = |rng: &mut ChaCha8Rng, zero: &dyn Fn(usize, usize) -> bool| {
        let data = (0..frames * bins)
            .map(|i| {
                if zero(i / bins, i % bins) {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                }
            })
            .collect();
        ComplexSpectrogram::new(data, frames, cfg, 16_000).unwrap()
    };
    let (mut bounded, mut routed, mut silent) = (0, 0, 0);
    for _ in 0..100 {
        // frame 0 silent everywhere, frame 1 only source 0 active in the low band,
        // frame 2 only source 1
        let mix = spec(&mut rng, &|t, _| t == 0);
        let a = spec(&mut rng, &|t, k| t == 0 || (t == 2 && k < boundary));
        let b = spec(&mut rng, &|t, k| t == 0 || (t == 1 && k < boundary));
        let out = heuristic_stft(&mix, &[a, b], boundary).unwrap();
        for t in 0..frames {
            for k in boundary..bins {
                let x = mix.at(t, k).norm();
                let (va, vb) = (out[0][t * bins + k], out[1][t * bins + k]);
                ensure(va.is_finite() && vb.is_finite(), "non-finite output".into())?;
                ensure(va <= x * (1.0 + 1e-12) && vb <= x * (1.0 + 1e-12), format!("frame {t} bin {k} exceeds mixture"))?;
                bounded += 1;
                if t == 1 || t == 2 {
                    let (active, idle) = if t == 1 { (va, vb) } else { (vb, va) };
                    ensure((active - x).abs() <= 1e-6 * x.max(1e-12) && idle == 0.0, format!("frame {t} not routed"))?;
                    routed += 1;
                }
            }
            if t == 0 {
                ensure(out.iter().all(|o| o[..bins].iter().all(|v| *v == 0.0)), "silent frame not zero".into())?;
                silent += 1;
            }
        }
    }
    Ok(format!("{bounded} high-band cells bounded, {routed} routed to the single active source, {silent} silent frames zero"))
}

fn toy_eval(ckpt: &Path, batch: &Batch) -> Result<(f64, f64), String> {
    let model = SeparationModel::load(ckpt).map_err(|e| e.to_string())?;
    let out = model.forward(&batch.mixture).map_err(|e| e.to_string())?;
    let backbone = batch_si_sdr_i(&out.initial, batch, false).map_err(|e| e.to_string())?;
    let last = batch_si_sdr_i(out.last(), batch, false).map_err(|e| e.to_string())?;
    Ok((backbone, last))
}

fn toy_learning() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rate = 16_000;
    let stft_cfg = StftConfig::new(256, 64, 256);
    let toy = ToyData {
        n_examples: 10,
        seconds: 0.5,
        seed: 11,
    };
    let cfg = TrainConfig {
        name: "backbone".into(),
        steps: 500,
        batch_size: 10,
        sample_rate: rate,
        workers: 1,
        backbone: tiny_config(stft_cfg),
        loss: LossConfig::si_sdr_only(),
        optim: OptimConfig {
            lr: 2e-3,
            ..OptimConfig::default()
        },
        checkpoint_every: 500,
        log_every: 50,
        validation: ValidationConfig {
            every: 0,
            ..ValidationConfig::default()
        },
        toy: Some(toy.clone()),
        ..TrainConfig::default()
    };
    let path = write_json(&dir.path().join("backbone.json"), &serde_json::to_value(&cfg).unwrap());
    let runs = dir.path().join("runs");
    let started = Instant::now();
    let r = medleysep(&["train", "--config", path.to_str().unwrap(), "--out", runs.to_str().unwrap()]);
    let elapsed = started.elapsed().as_secs_f64();
    ensure(code(&r) == 0, format!("train exited {}: {}", code(&r), stderr(&r)))?;
    let batch = Batch::from_examples(0, toy_duets(toy.n_examples, toy.seconds, rate, toy.seed).unwrap(), DType::F32).unwrap();
    let (_, start) = toy_eval(&runs.join("backbone/step_0.ckpt"), &batch)?;
    let (_, trained) = toy_eval(&runs.join("backbone/step_500.ckpt"), &batch)?;
    ensure(trained > 5.0, format!("train SI-SDRi {trained:.2} dB after 500 steps"))?;
    ensure(elapsed < 900.0, format!("500 steps took {elapsed:.0} s"))?;

    let joint = TrainConfig {
        name: "joint".into(),
        steps: 30,
        optim: OptimConfig {
            lr: 1e-3,
            ..OptimConfig::default()
        },
        checkpoint_every: 30,
        joint: Some(JointConfig {
            isrnet: ISRNetConfig {
                n_convnext_blocks: 2,
                channels: 16,
                kernel: 5,
                stft: stft_cfg,
                sample_rate: rate,
                ..ISRNetConfig::default()
            },
            ..JointConfig::default()
        }),
        ..cfg
    };
    let path = write_json(&dir.path().join("joint.json"), &serde_json::to_value(&joint).unwrap());
    let backbone = runs.join("backbone/step_500.ckpt");
    let r = medleysep(&[
        "finetune",
        "--config",
        path.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--backbone",
        backbone.to_str().unwrap(),
        "--boundary-hz",
        "3000",
    ]);
    ensure(code(&r) == 0, format!("finetune exited {}: {}", code(&r), stderr(&r)))?;
    let ck = runs.join("joint/step_30.ckpt");
    ensure(Checkpoint::load(&ck).map_err(|e| e.to_string())?.kind == "joint", "joint checkpoint kind".into())?;
    let (_, refined) = toy_eval(&ck, &batch)?;
    let gain = refined - trained;
    ensure(gain > 0.0, format!("joint {refined:.2} dB vs frozen backbone {trained:.2} dB"))?;
    Ok(format!(
        "SI-SDRi {start:.1} -> {trained:.1} dB in 500 steps ({elapsed:.0} s); joint iSRNet {refined:.2} dB, {gain:+.2} dB over the frozen backbone"
    ))
}

/// Target oracle SI-SDRi: (category, IBM, IRM, cIRM).
const TARGET_SI_SDR_I: [(&str, f64, f64, f64); 3] = [
    ("duet", 15.9, 15.3, 56.5),
    ("unison", 4.8, 4.5, 51.9),
    ("main_vs_rest", 13.7, 13.2, 57.0),
];

fn medleyvox_oracles() -> Option<Outcome> {
    let path = std::env::var_os("MEDLEYVOX_METADATA")?;
    let meta = match load_medleyvox_metadata(&path) {
        Ok(m) => m,
        Err(e) => return Some(Err(e.to_string())),
    };
    let opts = EvalOptions::default();
    let mut best: Vec<Option<(f64, f64, usize)>> = vec![None; TARGET_SI_SDR_I.len()];
    let mut notes = Vec::new();
    for fft in [1024, 2048, 4096] {
        let stft_cfg = StftConfig::new(fft, fft / 4, fft);
        let score = |kind| {
            let report = evaluate_dataset(&OracleSeparator { kind, stft: stft_cfg }, &meta, &opts);
            TARGET_SI_SDR_I.map(|(cat, ..)| report.summary.row(cat, false).map(|r| r.si_sdr_i_mean))
        };
        let (ibm, irm, cirm) = (score(MaskKind::Ibm), score(MaskKind::Irm), score(MaskKind::Cirm));
        for (i, (cat, p_ibm, p_irm, _)) in TARGET_SI_SDR_I.iter().enumerate() {
            let (Some(b), Some(r), Some(c)) = (ibm[i], irm[i], cirm[i]) else { continue };
            if c <= 50.0 || c < b || c < r {
                return Some(Err(format!("{cat} fft {fft}: cIRM {c:.1}, IBM {b:.1}, IRM {r:.1}")));
            }
            let dev = (b - p_ibm).abs().max((r - p_irm).abs());
            if best[i].is_none_or(|(d, ..)| dev < d) {
                best[i] = Some((dev, c, fft));
            }
        }
    }
    for (i, (cat, ..)) in TARGET_SI_SDR_I.iter().enumerate() {
        match best[i] {
            None => notes.push(format!("{cat}: no segments")),
            Some((dev, _, fft)) if dev <= 1.5 => notes.push(format!("{cat}: within {dev:.2} dB (fft {fft})")),
            Some((dev, ..)) => return Some(Err(format!("{cat}: IBM/IRM off by {dev:.2} dB at best"))),
        }
    }
    Some(Ok(notes.join("; ")))
}

fn main() {
    // libtest-style filtering and listing are not supported; run everything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Option<Outcome>); 9] = [
        ("mixture consistency", || Some(mixture_consistency())),
        ("loss correctness", || Some(loss_correctness())),
        ("PIT oracle equivalence", || Some(pit_oracle())),
        ("oracle mask ladder", || Some(oracle_ladder())),
        ("clipping regression", || Some(clipping_regression())),
        ("iSRNet size", || Some(isrnet_size())),
        ("heuristic STFT", || Some(heuristic_properties())),
        ("toy learning", || Some(toy_learning())),
        ("MedleyVox oracles", medleyvox_oracles),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Some(Err(format!("panicked: {msg}")))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Some(Ok(detail)) => println!("criterion {}: PASS {name}: {detail} [{secs:.1} s]", i + 1),
            Some(Err(detail)) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail} [{secs:.1} s]", i + 1);
            }
            None => println!("criterion {}: SKIP {name}: MEDLEYVOX_METADATA not set", i + 1),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
