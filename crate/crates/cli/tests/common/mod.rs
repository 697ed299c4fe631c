//! Fixtures shared by the command-line tests.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medleysep_core::audio::{write_wav, AudioBuffer, WavFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RATE: u32 = 24_000;

pub fn medleysep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medleysep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Harmonic tone with a slow vibrato and a short fade at both ends.
pub fn voice(f0: f64, secs: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (RATE as f64 * secs) as usize;
    let amps: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..1.0)).collect();
    let fade = (0.02 * RATE as f64) as usize;
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / RATE as f64;
            phase += 2.0 * PI * f0 * (1.0 + 0.01 * (2.0 * PI * 5.0 * t).sin()) / RATE as f64;
            let env = (i.min(n - 1 - i) as f64 / fade as f64).min(1.0);
            0.05 * env * amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * phase).sin()).sum::<f64>()
        })
        .collect()
}

/// Eight singing utterances (four singers, three songs) plus a manifest.
pub fn corpus(dir: &Path) -> PathBuf {
    let mut lines = String::new();
    for i in 0..8 {
        let name = format!("utt{i}.wav");
        let f0 = 140.0 + 35.0 * i as f64;
        write_wav(dir.join(&name), &AudioBuffer::new(voice(f0, 1.5, i), RATE).unwrap(), WavFormat::Float32).unwrap();
        lines.push_str(&serde_json::json!({
            "utterance_id": format!("u{i}"),
            "audio_path": name,
            "singer_id": format!("singer{}", i % 4),
            "song_id": format!("song{}", i % 3),
            "domain": "singing",
            "duration": 1.5,
        }).to_string());
        lines.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::File::create(&path).unwrap().write_all(lines.as_bytes()).unwrap();
    path
}

/// MedleyVox-format duets and unisons built from harmonic voices, with
/// stems and mixtures on disk.
pub fn medleyvox_like(dir: &Path) -> PathBuf {
    let mut f = std::fs::File::create(dir.join("metadata.jsonl")).unwrap();
    for k in 0..4 {
        let (category, f1) = if k % 2 == 0 { ("duet", 300.0) } else { ("unison", 182.0) };
        let a = voice(180.0 + k as f64, 1.0, 10 + k);
        let b = voice(f1 + 2.0 * k as f64, 1.0, 20 + k);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let names = [format!("seg{k}_mix.wav"), format!("seg{k}_a.wav"), format!("seg{k}_b.wav")];
        for (name, x) in names.iter().zip([mix, a, b]) {
            write_wav(dir.join(name), &AudioBuffer::new(x, RATE).unwrap(), WavFormat::Float32).unwrap();
        }
        let line = serde_json::json!({
            "segment_id": format!("seg{k}"),
            "song_id": format!("song{}", k / 2),
            "category": category,
            "n_singings": 2,
            "n_singers": 1,
            "start": 0.0,
            "end": 1.0,
            "mixture_path": names[0],
            "stem_paths": [names[1], names[2]],
        });
        writeln!(f, "{line}").unwrap();
    }
    dir.join("metadata.jsonl")
}

pub fn write_json(path: &Path, v: &serde_json::Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
