use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};
use crate::tensor::Matrix;

/// Post-rotary keys and values of one layer in natural position order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvSnapshot {
    pub layer: usize,
    pub keys: Matrix,
    pub values: Matrix,
}

/// Counters for one denoising step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// |M_t|: generation positions still masked when the step began.
    pub masked: usize,
    pub decoded: Vec<usize>,
    /// |C_t|, which is also the number of attention query rows.
    pub compute_rows: usize,
    pub cached_rows: usize,
    pub seq_len: usize,
    pub refresh: bool,
    /// Wall time of the step; absent in counters-only runs.
    #[serde(default)]
    pub millis: Option<f64>,
    pub macs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<KvSnapshot>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub records: Vec<StepRecord>,
}

impl StepTrace {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn gen_len(&self) -> usize {
        self.records.iter().map(|r| r.decoded.len()).sum()
    }

    pub fn seq_len(&self) -> usize {
        self.records.first().map_or(0, |r| r.seq_len)
    }

    pub fn has_snapshots(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.snapshot.is_some())
    }

    /// Step at which each position was decoded, indexed by position.
    pub fn decode_steps(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.seq_len()];
        for r in &self.records {
            for &p in &r.decoded {
                if let Some(slot) = out.get_mut(p) {
                    *slot = Some(r.step);
                }
            }
        }
        out
    }

    pub fn without_snapshots(&self) -> StepTrace {
        StepTrace {
            records: self
                .records
                .iter()
                .map(|r| StepRecord {
                    snapshot: None,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| AnalysisError::Parse {
                line: r.step + 1,
                message: e.to_string(),
            })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StepRecord = serde_json::from_str(&line).map_err(|e| AnalysisError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, decoded: Vec<usize>) -> StepRecord {
        StepRecord {
            step,
            masked: 4 - step,
            decoded,
            compute_rows: 6,
            cached_rows: 0,
            seq_len: 6,
            refresh: false,
            millis: None,
            macs: 10,
            snapshot: None,
        }
    }

    #[test]
    fn jsonl_round_trip_keeps_absent_timing() {
        let mut t = StepTrace {
            records: vec![rec(0, vec![3]), rec(1, vec![2, 5])],
        };
        t.records[1].snapshot = Some(KvSnapshot {
            layer: 0,
            keys: Matrix::from_vec(1, 2, vec![0.1, 1.0 / 3.0]),
            values: Matrix::from_vec(1, 2, vec![-2.5e-9, 7.0]),
        });
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"millis\":null"));
        let back = StepTrace::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.gen_len(), 3);
        assert_eq!(back.decode_steps(), vec![None, None, Some(1), Some(0), None, Some(1)]);
    }

    #[test]
    fn bad_line_is_reported() {
        let err = StepTrace::read_jsonl(&b"{\"step\": 0}\n"[..]).unwrap_err();
        assert!(matches!(err, AnalysisError::Parse { line: 1, .. }));
    }
}
