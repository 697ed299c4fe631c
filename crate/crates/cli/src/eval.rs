use std::path::{Path, PathBuf};

use medleysep_core::corpus::load_medleyvox_metadata;
use medleysep_core::eval::{evaluate_dataset, render_table, write_records, EvalOptions, EvalReport, OracleSeparator, Separator};
use medleysep_core::masks::MaskKind;
use medleysep_core::stft::StftConfig;
use medleysep_nn::model::{ModelSeparator, SeparationModel};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{origin, read_value, resolve, set, set_opt, write_echo};
use crate::error::{io_err, CliError, CliResult};
use crate::Common;

#[derive(Debug, Clone)]
pub enum Target {
    Checkpoint(Option<PathBuf>),
    Oracle(MaskKind),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metadata: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mask: Option<MaskKind>,
    pub out_dir: PathBuf,
    pub options: EvalOptions,
    /// STFT used by oracle masks.
    pub oracle_stft: StftConfig,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metadata: None,
            checkpoint: None,
            mask: None,
            out_dir: PathBuf::from("eval"),
            options: EvalOptions::default(),
            oracle_stft: StftConfig::default(),
            workers: 0,
        }
    }
}

pub fn resolve_config(common: &Common, target: &Target, metadata: Option<PathBuf>, clipped: bool) -> CliResult<EvalConfig> {
    let mut v = read_value(common.config.as_deref())?;
    set_opt(&mut v, &["out_dir"], common.out.as_ref());
    set_opt(&mut v, &["workers"], common.workers);
    set_opt(&mut v, &["metadata"], metadata.as_ref());
    if clipped {
        set(&mut v, &["options", "clipped_eval"], json!(true));
    }
    match target {
        Target::Checkpoint(p) => {
            set_opt(&mut v, &["checkpoint"], p.as_ref());
            set(&mut v, &["mask"], serde_json::Value::Null);
        }
        Target::Oracle(kind) => {
            set(&mut v, &["mask"], serde_json::to_value(kind).expect("mask kind serializes"));
            set(&mut v, &["checkpoint"], serde_json::Value::Null);
        }
    }
    let cfg: EvalConfig = resolve(v, &origin(common.config.as_deref()))?;
    if cfg.metadata.is_none() {
        return Err(CliError::config("field `metadata` is missing (set it or pass --metadata)"));
    }
    if cfg.mask.is_none() && cfg.checkpoint.is_none() {
        return Err(CliError::config("field `checkpoint` is missing (set it or pass --checkpoint)"));
    }
    cfg.oracle_stft.validate()?;
    Ok(cfg)
}

fn write_outputs(dir: &Path, report: &EvalReport) -> CliResult<()> {
    write_records(&dir.join("records.jsonl"), &report.records)?;
    let summary = json!({
        "separator": report.separator,
        "summary": report.summary,
        "skipped": report.skipped,
    });
    let p = dir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
        .map_err(|e| io_err(&p, e))?;
    let p = dir.join("summary.txt");
    std::fs::write(&p, render_table(&report.summary)).map_err(|e| io_err(&p, e))?;
    Ok(())
}

/// Scores the target on the metadata's segments and writes
/// `records.jsonl`, `summary.json`, `summary.txt` and `config.json`.
pub fn cmd_eval(common: &Common, target: Target, metadata: Option<PathBuf>, clipped: bool) -> CliResult<EvalReport> {
    let cfg = resolve_config(common, &target, metadata, clipped)?;
    print!("{}", crate::config::echo(&cfg));
    let meta = load_medleyvox_metadata(cfg.metadata.as_ref().expect("checked"))?;
    let separator: Box<dyn Separator + Send> = match (cfg.mask, &cfg.checkpoint) {
        (Some(kind), _) => Box::new(OracleSeparator {
            kind,
            stft: cfg.oracle_stft,
        }),
        (None, Some(p)) => Box::new(ModelSeparator {
            model: SeparationModel::load(p)?,
            label: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into()),
        }),
        (None, None) => unreachable!("checked in resolve_config"),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if cfg.workers > 0 {
        pool = pool.num_threads(cfg.workers);
    }
    let pool = pool.build().map_err(|e| CliError::config(e.to_string()))?;
    let report = pool.install(|| evaluate_dataset(separator.as_ref(), &meta, &cfg.options));
    write_echo(&cfg.out_dir, &cfg)?;
    write_outputs(&cfg.out_dir, &report)?;
    for (id, why) in &report.skipped {
        log::warn!("skipped {id}: {why}");
    }
    print!("{}", render_table(&report.summary));
    Ok(report)
}
