use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result, StepTrace};
use crate::model::ModelConfig;

/// Mean over steps of the fraction of positions served from cache.
pub fn cache_ratio(trace: &StepTrace) -> Result<f64> {
    if trace.records.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let sum: f64 = trace
        .records
        .iter()
        .map(|r| (r.seq_len - r.compute_rows) as f64 / r.seq_len as f64)
        .sum();
    Ok(sum / trace.records.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub total_query_rows: u64,
    pub total_macs: u64,
    pub max_step_rows: usize,
}

/// Query rows and multiply-accumulates summed over the trace. MACs count the
/// attention products and linear projections only.
pub fn compute_counters(trace: &StepTrace, config: &ModelConfig) -> Counters {
    let mut c = Counters {
        total_query_rows: 0,
        total_macs: 0,
        max_step_rows: 0,
    };
    for r in &trace.records {
        c.total_query_rows += r.compute_rows as u64;
        c.total_macs += r.compute_rows as u64 * config.macs_per_row(r.seq_len);
        c.max_step_rows = c.max_step_rows.max(r.compute_rows);
    }
    c
}

/// Generated tokens per second of recorded wall time; `None` when the trace
/// was produced without timing.
pub fn throughput(trace: &StepTrace) -> Result<Option<f64>> {
    if trace.records.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let Some(millis) = trace.records.iter().map(|r| r.millis).sum::<Option<f64>>() else {
        return Ok(None);
    };
    if millis <= 0.0 {
        return Err(AnalysisError::ZeroElapsed);
    }
    Ok(Some(trace.gen_len() as f64 / (millis / 1000.0)))
}

/// Flat summary written as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub steps: usize,
    pub gen_len: usize,
    pub seq_len: usize,
    pub cache_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_second: Option<f64>,
    pub total_query_rows: u64,
    pub total_macs: u64,
    pub max_step_rows: usize,
    /// Counters of an uncached run with the same shape (every step computes
    /// every position).
    pub baseline_query_rows: u64,
    pub baseline_macs: u64,
    pub row_reduction: f64,
    pub mac_reduction: f64,
}

impl RunReport {
    pub fn from_trace(trace: &StepTrace, config: &ModelConfig, variant: impl Into<String>) -> Result<Self> {
        let counters = compute_counters(trace, config);
        let seq_len = trace.seq_len();
        let steps = trace.steps();
        let baseline_query_rows = (steps * seq_len) as u64;
        let baseline_macs = baseline_query_rows * config.macs_per_row(seq_len);
        let reduction = |x: u64, base: u64| if base == 0 { 0.0 } else { 1.0 - x as f64 / base as f64 };
        Ok(Self {
            variant: variant.into(),
            steps,
            gen_len: trace.gen_len(),
            seq_len,
            cache_ratio: cache_ratio(trace)?,
            tokens_per_second: throughput(trace)?,
            total_query_rows: counters.total_query_rows,
            total_macs: counters.total_macs,
            max_step_rows: counters.max_step_rows,
            baseline_query_rows,
            baseline_macs,
            row_reduction: reduction(counters.total_query_rows, baseline_query_rows),
            mac_reduction: reduction(counters.total_macs, baseline_macs),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::StepRecord;

    fn trace(seq_len: usize, rows: &[usize], millis: Option<f64>) -> StepTrace {
        StepTrace {
            records: rows
                .iter()
                .enumerate()
                .map(|(step, &compute_rows)| StepRecord {
                    step,
                    masked: 0,
                    decoded: vec![step],
                    compute_rows,
                    cached_rows: seq_len - compute_rows,
                    seq_len,
                    refresh: false,
                    millis,
                    macs: 0,
                    snapshot: None,
                })
                .collect(),
        }
    }

    #[test]
    fn ratio_arithmetic() {
        let t = trace(8, &[8, 6, 4, 2], None);
        assert!((cache_ratio(&t).unwrap() - 0.375).abs() < 1e-12);
        assert_eq!(cache_ratio(&trace(8, &[8, 8, 8], None)).unwrap(), 0.0);
        assert!(matches!(cache_ratio(&StepTrace::default()), Err(AnalysisError::EmptyTrace)));
    }

    #[test]
    fn throughput_semantics() {
        let mut t = trace(200, &vec![200; 128], Some(2000.0 / 128.0));
        assert!((throughput(&t).unwrap().unwrap() - 64.0).abs() < 1e-9);
        t.records[3].millis = None;
        assert_eq!(throughput(&t).unwrap(), None);
        let z = trace(4, &[4], Some(0.0));
        assert!(matches!(throughput(&z), Err(AnalysisError::ZeroElapsed)));
    }

    #[test]
    fn counters_and_report() {
        let cfg = ModelConfig::tiny();
        let t = trace(8, &[8, 3, 5], None);
        let c = compute_counters(&t, &cfg);
        assert_eq!(c.total_query_rows, 16);
        assert_eq!(c.max_step_rows, 8);
        assert_eq!(c.total_macs, 16 * cfg.macs_per_row(8));
        let r = RunReport::from_trace(&t, &cfg, "decode:inf").unwrap();
        assert_eq!(r.baseline_query_rows, 24);
        assert!((r.row_reduction - (1.0 - 16.0 / 24.0)).abs() < 1e-12);
        assert!(r.tokens_per_second.is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("tokens_per_second"));
    }
}
