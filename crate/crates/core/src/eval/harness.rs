use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{bss_sdr, DEFAULT_FILTER_TAPS};
use crate::audio::{read_wav, sum_buffers, wav_round_trip, AudioBuffer, WavFormat};
use crate::corpus::{Category, MedleyVoxMetadata, MedleyVoxSegment};
use crate::error::{Error, Result};
use crate::masks::{apply_mask, oracle_masks, MaskKind};
use crate::objectives::{permutations, si_sdr};
use crate::resample::resample;
use crate::stft::{stft, StftConfig};

/// Anything that turns a mixture into one estimate per reference. Oracle
/// separators read the references; learned models ignore them.
pub trait Separator: Sync {
    fn name(&self) -> String;
    fn separate(&self, mixture: &AudioBuffer, references: &[AudioBuffer]) -> Result<Vec<AudioBuffer>>;
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSeparator {
    pub kind: MaskKind,
    pub stft: StftConfig,
}

impl Separator for OracleSeparator {
    fn name(&self) -> String {
        format!("oracle-{}", self.kind)
    }

    fn separate(&self, mixture: &AudioBuffer, references: &[AudioBuffer]) -> Result<Vec<AudioBuffer>> {
        let mix = stft(mixture, &self.stft)?;
        let stems = references
            .iter()
            .map(|r| stft(r, &self.stft))
            .collect::<Result<Vec<_>>>()?;
        oracle_masks(self.kind, &stems, &mix)?
            .iter()
            .map(|m| apply_mask(m, &mix, mixture.len()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    /// Best SI-SDRi permutation for unison/duet, fixed order for main_vs_rest.
    Auto,
    /// Outputs are scored in the order the separator returns them.
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub permutation_mode: PermutationMode,
    /// Also score every segment after a 16-bit WAV save-and-load.
    pub clipped_eval: bool,
    /// Resample mixtures and stems to this rate before separation.
    pub resample: Option<u32>,
    pub filter_taps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            permutation_mode: PermutationMode::Auto,
            clipped_eval: false,
            resample: None,
            filter_taps: DEFAULT_FILTER_TAPS,
        }
    }
}

/// A scorable segment: metadata plus audio, references already in
/// evaluation form (main_vs_rest as `[main, rest_sum]`).
#[derive(Debug, Clone)]
pub struct EvalSegment {
    pub info: MedleyVoxSegment,
    pub mixture: AudioBuffer,
    pub references: Vec<AudioBuffer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub segment_id: String,
    pub song_id: String,
    pub category: Category,
    pub n_singings: u32,
    pub n_singers: u32,
    pub sdr: Vec<f64>,
    pub si_sdr: Vec<f64>,
    pub sdr_i: Vec<f64>,
    pub si_sdr_i: Vec<f64>,
    /// `permutation_used[i]` is the output scored against reference `i`.
    pub permutation_used: Vec<usize>,
    pub clipped_eval: bool,
    pub reduced_taps: bool,
    pub regularized: bool,
}

/// Estimates reordered to match the reference list.
#[derive(Debug, Clone)]
pub struct SeparationEstimate {
    pub estimates: Vec<AudioBuffer>,
    pub permutation: Vec<usize>,
}

/// Picks the output order maximizing mean SI-SDR improvement (equivalently
/// mean SI-SDR, since the mixture baseline does not depend on the order).
pub fn align_estimates(
    outputs: &[AudioBuffer],
    references: &[AudioBuffer],
    search: bool,
) -> Result<SeparationEstimate> {
    if outputs.len() != references.len() {
        return Err(Error::shape(format!(
            "{} outputs for {} references",
            outputs.len(),
            references.len()
        )));
    }
    let n = references.len();
    let permutation = if search {
        let mut score = vec![vec![0.0; n]; n];
        for (r, row) in score.iter_mut().enumerate() {
            for (o, cell) in row.iter_mut().enumerate() {
                *cell = si_sdr(outputs[o].samples(), references[r].samples())?;
            }
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in permutations(n) {
            let s: f64 = p.iter().enumerate().map(|(r, &o)| score[r][o]).sum();
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
        best.unwrap().1
    } else {
        (0..n).collect()
    };
    Ok(SeparationEstimate {
        estimates: permutation.iter().map(|&o| outputs[o].clone()).collect(),
        permutation,
    })
}

fn score_segment(
    seg: &EvalSegment,
    outputs: &[AudioBuffer],
    clipped: bool,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    let outputs: Vec<AudioBuffer> = if clipped {
        outputs
            .iter()
            .map(|o| wav_round_trip(o, WavFormat::Pcm16))
            .collect::<Result<_>>()?
    } else {
        outputs.to_vec()
    };
    let search = opts.permutation_mode == PermutationMode::Auto
        && seg.info.category != Category::MainVsRest;
    let aligned = align_estimates(&outputs, &seg.references, search)?;
    let refs: Vec<&[f64]> = seg.references.iter().map(|r| r.samples()).collect();
    let mix = seg.mixture.samples();
    let mut rec = EvalRecord {
        segment_id: seg.info.segment_id.clone(),
        song_id: seg.info.song_id.clone(),
        category: seg.info.category,
        n_singings: seg.info.n_singings,
        n_singers: seg.info.n_singers,
        sdr: vec![],
        si_sdr: vec![],
        sdr_i: vec![],
        si_sdr_i: vec![],
        permutation_used: aligned.permutation.clone(),
        clipped_eval: clipped,
        reduced_taps: false,
        regularized: false,
    };
    for (i, est) in aligned.estimates.iter().enumerate() {
        let s = si_sdr(est.samples(), refs[i])?;
        let s0 = si_sdr(mix, refs[i])?;
        let d = bss_sdr(est.samples(), &refs, i, opts.filter_taps)?;
        let d0 = bss_sdr(mix, &refs, i, opts.filter_taps)?;
        rec.si_sdr.push(s);
        rec.si_sdr_i.push(s - s0);
        rec.sdr.push(d.sdr);
        rec.sdr_i.push(d.sdr - d0.sdr);
        rec.reduced_taps |= d.taps_used < opts.filter_taps;
        rec.regularized |= d.regularized || d0.regularized;
    }
    Ok(rec)
}

/// Reads a segment's audio, cuts main_vs_rest stems to `[main, rest_sum]`,
/// trims everything to a common length, and optionally resamples.
pub fn load_segment(
    meta: &MedleyVoxMetadata,
    seg: &MedleyVoxSegment,
    resample_to: Option<u32>,
) -> Result<EvalSegment> {
    let load = |p: &str| -> Result<AudioBuffer> {
        let a = read_wav(meta.resolve(p))?;
        match resample_to {
            Some(rate) => resample(&a, rate),
            None => Ok(a),
        }
    };
    let mixture = load(&seg.mixture_path)?;
    let stems = seg
        .stem_paths
        .iter()
        .map(|p| load(p))
        .collect::<Result<Vec<_>>>()?;
    if stems.iter().any(|s| s.sample_rate() != mixture.sample_rate()) {
        return Err(Error::shape(format!(
            "segment {} mixes sample rates",
            seg.segment_id
        )));
    }
    let len = stems.iter().map(AudioBuffer::len).fold(mixture.len(), usize::min);
    let mixture = mixture.fit_to_len(len)?;
    let stems = stems
        .iter()
        .map(|s| s.fit_to_len(len))
        .collect::<Result<Vec<_>>>()?;
    let references = match (seg.category, seg.main_index) {
        (Category::MainVsRest, Some(m)) if stems.len() > 2 || m != 0 => {
            let rest: Vec<AudioBuffer> = stems
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != m)
                .map(|(_, s)| s.clone())
                .collect();
            vec![stems[m].clone(), sum_buffers(&rest)?]
        }
        _ => stems,
    };
    Ok(EvalSegment {
        info: seg.clone(),
        mixture,
        references,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub separator: String,
    pub records: Vec<EvalRecord>,
    /// `(segment_id, reason)` for segments that could not be scored.
    pub skipped: Vec<(String, String)>,
    pub summary: Summary,
}

/// Scores in-memory segments. Failing segments are skipped and listed.
pub fn evaluate_segments<S: Separator + ?Sized>(
    separator: &S,
    segments: &[EvalSegment],
    opts: &EvalOptions,
) -> EvalReport {
    let results: Vec<std::result::Result<Vec<EvalRecord>, (String, String)>> = segments
        .par_iter()
        .map(|seg| {
            let run = || -> Result<Vec<EvalRecord>> {
                let outputs = separator.separate(&seg.mixture, &seg.references)?;
                if outputs.iter().any(|o| o.len() != seg.mixture.len()) {
                    return Err(Error::shape("separator changed the signal length"));
                }
                let mut recs = vec![score_segment(seg, &outputs, false, opts)?];
                if opts.clipped_eval {
                    recs.push(score_segment(seg, &outputs, true, opts)?);
                }
                Ok(recs)
            };
            run().map_err(|e| (seg.info.segment_id.clone(), e.to_string()))
        })
        .collect();
    let mut report = EvalReport {
        separator: separator.name(),
        ..Default::default()
    };
    for r in results {
        match r {
            Ok(recs) => report.records.extend(recs),
            Err(skip) => {
                log::warn!("skipping segment {}: {}", skip.0, skip.1);
                report.skipped.push(skip);
            }
        }
    }
    report.summary = summarize(&report.records, report.skipped.len());
    report
}

/// Loads and scores every validated segment of `meta`.
pub fn evaluate_dataset<S: Separator + ?Sized>(
    separator: &S,
    meta: &MedleyVoxMetadata,
    opts: &EvalOptions,
) -> EvalReport {
    let mut skipped = Vec::new();
    let mut loaded = Vec::new();
    for seg in &meta.segments {
        match load_segment(meta, seg, opts.resample) {
            Ok(s) => loaded.push(s),
            Err(e) => {
                log::warn!("cannot load segment {}: {e}", seg.segment_id);
                skipped.push((seg.segment_id.clone(), e.to_string()));
            }
        }
    }
    let mut report = evaluate_segments(separator, &loaded, opts);
    skipped.append(&mut report.skipped);
    report.skipped = skipped;
    report.summary = summarize(&report.records, report.skipped.len());
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// Category name, or `category/<singings>singings/<singers>singers`.
    pub group: String,
    pub clipped_eval: bool,
    pub segments: usize,
    /// Per-source values pooled over segments.
    pub sources: usize,
    pub sdr_i_mean: f64,
    pub sdr_i_median: f64,
    pub si_sdr_i_mean: f64,
    pub si_sdr_i_median: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub total_segments: usize,
    pub skipped_segments: usize,
    pub no_segments: bool,
}

impl Summary {
    pub fn row(&self, group: &str, clipped: bool) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.clipped_eval == clipped)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Mean and median per category and per `(category, singings, singers)`
/// cell, separately for clipped and unclipped scoring.
pub fn summarize(records: &[EvalRecord], skipped: usize) -> Summary {
    let mut groups: BTreeMap<(String, bool), (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut segments = std::collections::BTreeSet::new();
    for r in records {
        segments.insert(r.segment_id.clone());
        let cell = format!("{}/{}singings/{}singers", r.category, r.n_singings, r.n_singers);
        for key in [r.category.to_string(), cell] {
            let g = groups.entry((key, r.clipped_eval)).or_default();
            g.0 += 1;
            g.1.extend(&r.sdr_i);
            g.2.extend(&r.si_sdr_i);
        }
    }
    let rows = groups
        .into_iter()
        .map(|((group, clipped_eval), (n, sdr, si))| SummaryRow {
            group,
            clipped_eval,
            segments: n,
            sources: si.len(),
            sdr_i_mean: mean(&sdr),
            sdr_i_median: median(&sdr),
            si_sdr_i_mean: mean(&si),
            si_sdr_i_median: median(&si),
        })
        .collect();
    Summary {
        rows,
        total_segments: segments.len(),
        skipped_segments: skipped,
        no_segments: segments.is_empty(),
    }
}

/// Plain-text table, one line per summary row.
pub fn render_table(summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<40} {:>9} {:>5} {:>10} {:>10} {:>10} {:>10}\n",
        "group", "mode", "segs", "SDRi", "SDRi med", "SI-SDRi", "SI-SDRi med"
    ));
    for r in &summary.rows {
        out.push_str(&format!(
            "{:<40} {:>9} {:>5} {:>10.2} {:>10.2} {:>10.2} {:>10.2}\n",
            r.group,
            if r.clipped_eval { "clipped" } else { "unclipped" },
            r.segments,
            r.sdr_i_mean,
            r.sdr_i_median,
            r.si_sdr_i_mean,
            r.si_sdr_i_median
        ));
    }
    if summary.no_segments {
        out.push_str("(no segments scored)\n");
    }
    if summary.skipped_segments > 0 {
        out.push_str(&format!("skipped segments: {}\n", summary.skipped_segments));
    }
    out
}

/// One JSON object per record.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
