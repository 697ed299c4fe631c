//! Segment scoring and category aggregation.

mod harness;
mod metrics;

pub use harness::{
    align_estimates, evaluate_dataset, evaluate_segments, load_segment, render_table,
    summarize, write_records, EvalOptions, EvalRecord, EvalReport, EvalSegment,
    OracleSeparator, PermutationMode, SeparationEstimate, Separator, Summary, SummaryRow,
};
pub use metrics::{bss_eval, bss_sdr, improvement, BssScores, BssSdr, Metric, DEFAULT_FILTER_TAPS};
