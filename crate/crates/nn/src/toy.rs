//! Synthetic two-voice material for smoke runs: harmonic tones with
//! vibrato and syllable envelopes, one low voice and one high voice.

use std::f64::consts::PI;

use medleysep_core::corpus::Category;
use medleysep_core::mixer::{MixtureExample, Provenance};
use medleysep_core::AudioBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

const HARMONICS: usize = 8;

fn voice<R: Rng>(rng: &mut R, len: usize, rate: u32, f0_range: (f64, f64)) -> Vec<f64> {
    let f0 = rng.gen_range(f0_range.0..f0_range.1);
    let vib_rate = rng.gen_range(4.0..6.5);
    let vib_depth = rng.gen_range(0.005..0.02);
    let tilt = rng.gen_range(0.6..1.2);
    let amps: Vec<f64> = (1..=HARMONICS)
        .map(|h| rng.gen_range(0.5..1.0) / (h as f64).powf(tilt))
        .collect();
    let syllables = rng.gen_range(2..5);
    let edges: Vec<f64> = {
        let mut e: Vec<f64> = (0..syllables - 1).map(|_| rng.gen_range(0.1..0.9)).collect();
        e.sort_by(f64::total_cmp);
        e
    };
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / rate as f64;
        let pos = n as f64 / len as f64;
        let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
        phase += 2.0 * PI * f / rate as f64;
        let dist = edges.iter().map(|e| (pos - e).abs()).fold(1.0, f64::min);
        let env = (dist / 0.04).min(1.0) * (pos / 0.02).min(1.0) * ((1.0 - pos) / 0.02).min(1.0);
        let s: f64 = amps
            .iter()
            .enumerate()
            .filter(|(h, _)| f * (*h as f64 + 1.0) < 0.45 * rate as f64)
            .map(|(h, a)| a * (phase * (h as f64 + 1.0)).sin())
            .sum();
        out.push(0.1 * env * s);
    }
    out
}

/// `n` fixed duets of `seconds` each.
pub fn toy_duets(n: usize, seconds: f64, rate: u32, seed: u64) -> Result<Vec<MixtureExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * rate as f64).round() as usize;
    (0..n)
        .map(|i| {
            let a = voice(&mut rng, len, rate, (110.0, 190.0));
            let b = voice(&mut rng, len, rate, (220.0, 380.0));
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            Ok(MixtureExample {
                mixture: AudioBuffer::new(mix, rate)?,
                sources: vec![AudioBuffer::new(a, rate)?, AudioBuffer::new(b, rate)?],
                category: Category::Duet,
                provenance: Provenance {
                    utterance_ids: vec![format!("toy{i}a"), format!("toy{i}b")],
                    singer_ids: vec!["low".into(), "high".into()],
                    ..Provenance::default()
                },
            })
        })
        .collect()
}
