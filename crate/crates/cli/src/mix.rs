use std::io::Write;
use std::path::{Path, PathBuf};

use medleysep_core::audio::{write_wav, WavFormat};
use medleysep_core::corpus::{load_manifest, Category, Manifest};
use medleysep_core::mixer::{DynamicMixer, MixPolicy, MixtureExample, Provenance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{origin, read_value, resolve, set, set_opt, write_echo};
use crate::error::{io_err, CliError, CliResult};
use crate::Common;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub manifests: Vec<PathBuf>,
    pub policy: MixPolicy,
    pub sample_rate: u32,
    pub n_examples: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: WavFormat,
    pub workers: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            manifests: Vec::new(),
            policy: MixPolicy::default(),
            sample_rate: 24_000,
            n_examples: 10,
            seed: 0,
            out_dir: PathBuf::from("mixtures"),
            format: WavFormat::Float32,
            workers: 1,
        }
    }
}

/// One line of `provenance.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceLine {
    pub index: usize,
    pub category: Category,
    pub mixture: String,
    pub sources: Vec<String>,
    pub provenance: Provenance,
}

const BLOCK: usize = 64;

fn draw(mixer: &mut DynamicMixer, seed: u64, index: usize) -> medleysep_core::Result<MixtureExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    mixer.draw(&mut rng)
}

fn write_example(dir: &Path, i: usize, ex: &MixtureExample, format: WavFormat) -> CliResult<ProvenanceLine> {
    let mixture = format!("{i:05}_mixture.wav");
    write_wav(dir.join(&mixture), &ex.mixture, format)?;
    let mut sources = Vec::new();
    for (j, s) in ex.sources.iter().enumerate() {
        let name = format!("{i:05}_source{j}.wav");
        write_wav(dir.join(&name), s, format)?;
        sources.push(name);
    }
    Ok(ProvenanceLine {
        index: i,
        category: ex.category,
        mixture,
        sources,
        provenance: ex.provenance.clone(),
    })
}

pub fn cmd_mix(common: &Common, n_examples: Option<usize>, category: Option<&str>) -> CliResult<()> {
    let mut v = read_value(common.config.as_deref())?;
    set_opt(&mut v, &["seed"], common.seed);
    set_opt(&mut v, &["out_dir"], common.out.as_ref());
    set_opt(&mut v, &["workers"], common.workers);
    set_opt(&mut v, &["n_examples"], n_examples);
    if let Some(c) = category {
        let c: Category = c.parse()?;
        set(&mut v, &["policy", "category"], serde_json::to_value(c).expect("category serializes"));
    }
    let cfg: MixConfig = resolve(v, &origin(common.config.as_deref()))?;
    cfg.policy.validate()?;
    if cfg.manifests.is_empty() {
        return Err(CliError::config("field `manifests` is missing or empty"));
    }
    print!("{}", crate::config::echo(&cfg));
    let manifest = Manifest::merge(
        cfg.manifests
            .iter()
            .map(load_manifest)
            .collect::<medleysep_core::Result<Vec<_>>>()?,
    )?;
    // Validates the manifest/policy pair before any output is written.
    DynamicMixer::new(manifest.clone(), cfg.policy.clone(), cfg.sample_rate)?;
    write_echo(&cfg.out_dir, &cfg)?;
    let prov_path = cfg.out_dir.join("provenance.jsonl");
    let mut prov = std::io::BufWriter::new(std::fs::File::create(&prov_path).map_err(|e| io_err(&prov_path, e))?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| CliError::config(e.to_string()))?;
    for start in (0..cfg.n_examples).step_by(BLOCK) {
        let end = (start + BLOCK).min(cfg.n_examples);
        let examples: Vec<medleysep_core::Result<MixtureExample>> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map_init(
                    || DynamicMixer::new(manifest.clone(), cfg.policy.clone(), cfg.sample_rate),
                    |mixer, i| match mixer {
                        Ok(m) => draw(m, cfg.seed, i),
                        Err(e) => Err(medleysep_core::Error::InvalidConfig(e.to_string())),
                    },
                )
                .collect()
        });
        for (i, ex) in (start..end).zip(examples) {
            let line = write_example(&cfg.out_dir, i, &ex?, cfg.format)?;
            let text = serde_json::to_string(&line).expect("provenance serializes");
            writeln!(prov, "{text}").map_err(|e| io_err(&prov_path, e))?;
        }
    }
    prov.flush().map_err(|e| io_err(&prov_path, e))?;
    log::info!("wrote {} examples to {}", cfg.n_examples, cfg.out_dir.display());
    Ok(())
}
