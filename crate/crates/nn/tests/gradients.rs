//! Central-difference checks of the analytic gradients in f64.

use candle_core::{DType, Device, Tensor, Var};
use medleysep_core::stft::StftConfig;
use medleysep_nn::dsp::TensorStft;
use medleysep_nn::losses::{mixture_consistency, multi_res_stft_loss, ri_stft_loss, si_sdr, snr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEN: usize = 1024;
const H: f64 = 1e-5;
const PROBES: usize = 24;

fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

/// Compares d f / d x at random probe points. `f` maps the input tensor to a
/// scalar.
fn check<F>(name: &str, x0: Vec<f64>, shape: &[usize], f: F)
where
    F: Fn(&Tensor) -> Tensor,
{
    let var = Var::from_tensor(&tensor(&x0, shape)).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let g = grads
        .get(var.as_tensor())
        .expect("gradient present")
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..PROBES {
        let i = rng.gen_range(0..x0.len());
        let eval = |delta: f64| {
            let mut x = x0.clone();
            x[i] += delta;
            f(&tensor(&x, shape)).to_scalar::<f64>().unwrap()
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        num += (fd - g[i]).powi(2);
        den += fd.powi(2).max(g[i].powi(2));
    }
    let rel = (num / den.max(1e-30)).sqrt();
    println!("{name}: relative gradient error {rel:.2e}");
    assert!(rel < 1e-3, "{name}: relative error {rel}");
}

fn reference() -> Tensor {
    tensor(&random(1, LEN), &[1, LEN])
}

fn estimate_start() -> Vec<f64> {
    let r = random(1, LEN);
    let n = random(2, LEN);
    r.iter().zip(&n).map(|(a, b)| 0.7 * a + 0.3 * b).collect()
}

fn stfts() -> Vec<TensorStft> {
    [StftConfig::new(256, 64, 256), StftConfig::new(128, 32, 128)]
        .into_iter()
        .map(|c| TensorStft::new(c, DType::F64, &Device::Cpu).unwrap())
        .collect()
}

#[test]
fn snr_gradient() {
    let r = reference();
    check("snr", estimate_start(), &[1, LEN], |x| snr(x, &r).unwrap().sum_all().unwrap());
}

#[test]
fn si_sdr_gradient() {
    let r = reference();
    check("si_sdr", estimate_start(), &[1, LEN], |x| si_sdr(x, &r).unwrap().sum_all().unwrap());
}

#[test]
fn multi_resolution_gradient() {
    let r = reference();
    let s = stfts();
    check("multi_res", estimate_start(), &[1, LEN], |x| {
        multi_res_stft_loss(x, &r, &s).unwrap().sum_all().unwrap()
    });
}

#[test]
fn ri_gradient() {
    let r = reference();
    let s = stfts();
    check("ri", estimate_start(), &[1, LEN], |x| ri_stft_loss(x, &r, &s).unwrap().sum_all().unwrap());
}

#[test]
fn mixture_consistency_gradient() {
    let mix = tensor(&random(3, LEN), &[1, LEN]);
    let w = tensor(&random(4, 2 * LEN), &[1, 2, LEN]);
    check("mixture_consistency", random(5, 2 * LEN), &[1, 2, LEN], |x| {
        (mixture_consistency(x, &mix).unwrap() * &w).unwrap().sqr().unwrap().sum_all().unwrap()
    });
}
