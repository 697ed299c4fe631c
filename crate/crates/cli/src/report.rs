use std::io::BufRead;
use std::path::{Path, PathBuf};

use medleysep_core::eval::{render_table, summarize, EvalRecord};
use medleysep_nn::train::StepRecord;

use crate::error::{io_err, CliError, CliResult};

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn report_run(log: &Path) -> CliResult<()> {
    let recs: Vec<StepRecord> = read_jsonl(log)?;
    println!("{}", log.display());
    match recs.last() {
        None => println!("  no logged steps"),
        Some(last) => {
            println!("  logged steps: {}, last step {} loss {:.4} lr {:.2e}", recs.len(), last.step, last.loss_avg, last.lr);
            let skipped = recs.iter().filter(|r| r.skipped).count();
            if skipped > 0 {
                println!("  skipped steps: {skipped}");
            }
            if let Some(best) = recs
                .iter()
                .filter_map(|r| r.val_si_sdr_i.map(|v| (r.step, v)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
            {
                println!("  best validation SI-SDRi {:.2} dB at step {}", best.1, best.0);
            }
        }
    }
    Ok(())
}

/// Prints a summary table for evaluation records and a short digest for
/// training logs.
pub fn cmd_report(paths: &[PathBuf]) -> CliResult<()> {
    let mut records: Vec<EvalRecord> = Vec::new();
    for p in paths {
        if p.is_dir() {
            let log = p.join("log.jsonl");
            let recs = p.join("records.jsonl");
            if log.exists() {
                report_run(&log)?;
            } else if recs.exists() {
                records.extend(read_jsonl::<EvalRecord>(&recs)?);
            } else {
                return Err(CliError::io(format!("{}: no records.jsonl or log.jsonl", p.display())));
            }
        } else if p.file_name().is_some_and(|n| n == "log.jsonl") {
            report_run(p)?;
        } else {
            records.extend(read_jsonl::<EvalRecord>(p)?);
        }
    }
    if !records.is_empty() || paths.iter().all(|p| !p.join("log.jsonl").exists()) {
        print!("{}", render_table(&summarize(&records, 0)));
    }
    Ok(())
}
