use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;

use medleysep_nn::train::{build_sources, TrainConfig, Trainer};
use serde_json::Value;

use crate::config::{echo, origin, read_value, resolve, set, set_opt};
use crate::error::{CliError, CliResult};
use crate::Common;

#[derive(Debug, Clone, Default)]
pub struct FinetuneFlags {
    pub backbone: Option<PathBuf>,
    pub boundary_hz: Option<u32>,
}

/// Resolves a training config from file and flags. `finetune` selects the
/// joint stage, which requires a `joint` section and a backbone checkpoint.
pub fn resolve_config(common: &Common, steps: Option<u64>, finetune: Option<&FinetuneFlags>) -> CliResult<TrainConfig> {
    let mut v = read_value(common.config.as_deref())?;
    set_opt(&mut v, &["seed"], common.seed);
    set_opt(&mut v, &["out_dir"], common.out.as_ref());
    set_opt(&mut v, &["workers"], common.workers);
    set_opt(&mut v, &["steps"], steps);
    let has_joint = v.get("joint").is_some_and(|j| !j.is_null());
    match finetune {
        Some(f) => {
            if !has_joint {
                set(&mut v, &["joint"], Value::Object(Default::default()));
            }
            set_opt(&mut v, &["joint", "backbone_checkpoint"], f.backbone.as_ref());
            set_opt(&mut v, &["joint", "isrnet", "freq_boundary_hz"], f.boundary_hz);
            // iSRNet runs at the model rate unless the file says otherwise.
            if v["joint"].get("isrnet").and_then(|i| i.get("sample_rate")).is_none() {
                let rate = v.get("sample_rate").cloned().unwrap_or_else(|| TrainConfig::default().sample_rate.into());
                set(&mut v, &["joint", "isrnet", "sample_rate"], rate);
            }
        }
        None if has_joint => {
            return Err(CliError::config("config has a `joint` section; use `finetune` for joint training"));
        }
        None => {}
    }
    let cfg: TrainConfig = resolve(v, &origin(common.config.as_deref()))?;
    if let Some(j) = &cfg.joint {
        if j.backbone_checkpoint.is_none() {
            return Err(CliError::config(
                "field `joint.backbone_checkpoint` is missing (set it or pass --backbone)",
            ));
        }
    }
    if cfg.toy.is_none() && cfg.manifests.is_empty() {
        return Err(CliError::config("field `manifests` is missing or empty (list manifest files or set `toy`)"));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(common: &Common, steps: Option<u64>, resume: Option<&Path>, finetune: Option<FinetuneFlags>) -> CliResult<()> {
    let cfg = resolve_config(common, steps, finetune.as_ref())?;
    print!("{}", echo(&cfg));
    let (source, validation) = build_sources(&cfg)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, p)?,
        None => Trainer::new(cfg)?,
    };
    let stop = trainer.stop_handle();
    if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::Relaxed)) {
        log::debug!("interrupt handler not installed: {e}");
    }
    let summary = trainer.run(source.as_ref(), &validation)?;
    let last = summary.records.last();
    println!(
        "finished at step {}{}; last loss {}; checkpoints: {}",
        summary.final_step,
        if summary.stopped { " (stopped)" } else { "" },
        last.map(|r| format!("{:.4}", r.loss_avg)).unwrap_or_else(|| "n/a".into()),
        summary.checkpoints.len()
    );
    Ok(())
}
