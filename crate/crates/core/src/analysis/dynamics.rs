use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result, StepTrace};
use crate::par;
use crate::tensor::Matrix;

/// Per-token change statistics for one of K or V.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDynamics {
    pub token_position: usize,
    pub decode_step: usize,
    /// Mean step-to-step change while the input was still masked.
    pub pre_mean: f64,
    /// Mean step-to-step change after the revealed token was first fed in.
    pub post_mean: Option<f64>,
    /// Change between the decode step and the next one, when that step exists.
    pub reveal_change: Option<f64>,
    pub median_change: f64,
    pub max_change_step: usize,
    /// Steps `s` (change measured from `s-1` to `s`) with the two largest and
    /// two smallest changes.
    pub top_largest: Vec<usize>,
    pub top_smallest: Vec<usize>,
}

/// Representation dynamics over a snapshot trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub layer: usize,
    pub key_euclidean: Vec<Vec<f64>>,
    pub key_cosine: Vec<Vec<f64>>,
    pub value_euclidean: Vec<Vec<f64>>,
    pub value_cosine: Vec<Vec<f64>>,
    pub key_tokens: Vec<TokenDynamics>,
    pub value_tokens: Vec<TokenDynamics>,
}

fn row_dist(a: &[f32], b: &[f32]) -> (f64, f64) {
    let (mut d2, mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        d2 += (x - y) * (x - y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let cos = if na == 0.0 || nb == 0.0 { 1.0 } else { dot / (na.sqrt() * nb.sqrt()) };
    (d2.sqrt(), 1.0 - cos)
}

/// Mean per-row Euclidean and cosine distances between every pair of steps.
/// Each unordered pair is computed once and mirrored, so the matrices are
/// exactly symmetric with a zero diagonal.
fn pairwise(snaps: &[&Matrix]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = snaps.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists = par::map(&pairs, |&(i, j)| {
        let rows = snaps[i].rows();
        let (mut e, mut c) = (0.0, 0.0);
        for r in 0..rows {
            let (de, dc) = row_dist(snaps[i].row(r), snaps[j].row(r));
            e += de;
            c += dc;
        }
        (e / rows as f64, c / rows as f64)
    });
    let mut euc = vec![vec![0.0; n]; n];
    let mut cos = vec![vec![0.0; n]; n];
    for (&(i, j), &(e, c)) in pairs.iter().zip(&dists) {
        euc[i][j] = e;
        euc[j][i] = e;
        cos[i][j] = c;
        cos[j][i] = c;
    }
    (euc, cos)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn token_stats(snaps: &[&Matrix], decode_steps: &[Option<usize>]) -> Vec<TokenDynamics> {
    let t = snaps.len();
    decode_steps
        .iter()
        .enumerate()
        .filter_map(|(p, d)| d.map(|d| (p, d)))
        .map(|(p, decode_step)| {
            // change[s - 1] is the change from step s-1 to step s.
            let change: Vec<f64> = (1..t).map(|s| row_dist(snaps[s - 1].row(p), snaps[s].row(p)).0).collect();
            let at = |s: usize| change[s - 1];
            let mut order: Vec<usize> = (1..t).collect();
            order.sort_by(|&a, &b| at(b).total_cmp(&at(a)).then(a.cmp(&b)));
            let mut asc = order.clone();
            asc.sort_by(|&a, &b| at(a).total_cmp(&at(b)).then(a.cmp(&b)));
            TokenDynamics {
                token_position: p,
                decode_step,
                pre_mean: mean((1..=decode_step.min(t.saturating_sub(1))).map(at)).unwrap_or(0.0),
                post_mean: mean((decode_step + 2..t).map(at)),
                reveal_change: (decode_step + 1 < t).then(|| at(decode_step + 1)),
                median_change: median(&change),
                max_change_step: order.first().copied().unwrap_or(0),
                top_largest: order.iter().take(2).copied().collect(),
                top_smallest: asc.iter().take(2).copied().collect(),
            }
        })
        .collect()
}

/// Step×step distance matrices and per-token change statistics for the
/// snapshot layer.
pub fn kv_dynamics(trace: &StepTrace) -> Result<Dynamics> {
    if trace.records.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    if !trace.has_snapshots() {
        return Err(AnalysisError::MissingSnapshots);
    }
    let snaps: Vec<_> = trace.records.iter().map(|r| r.snapshot.as_ref().unwrap()).collect();
    let keys: Vec<&Matrix> = snaps.iter().map(|s| &s.keys).collect();
    let values: Vec<&Matrix> = snaps.iter().map(|s| &s.values).collect();
    let (key_euclidean, key_cosine) = pairwise(&keys);
    let (value_euclidean, value_cosine) = pairwise(&values);
    let decode_steps = trace.decode_steps();
    Ok(Dynamics {
        layer: snaps[0].layer,
        key_euclidean,
        key_cosine,
        value_euclidean,
        value_cosine,
        key_tokens: token_stats(&keys, &decode_steps),
        value_tokens: token_stats(&values, &decode_steps),
    })
}

impl Dynamics {
    /// Fraction of tokens (with a step after their decode step) whose change
    /// on the reveal step exceeds their median step change.
    pub fn reveal_spike_fraction(tokens: &[TokenDynamics]) -> Option<f64> {
        let eligible: Vec<_> = tokens.iter().filter_map(|t| t.reveal_change.map(|c| (c, t.median_change))).collect();
        if eligible.is_empty() {
            return None;
        }
        Some(eligible.iter().filter(|(c, m)| c > m).count() as f64 / eligible.len() as f64)
    }

    pub fn write_matrix_csv<W: Write>(matrix: &[Vec<f64>], mut w: W) -> std::io::Result<()> {
        write!(w, "step")?;
        for j in 0..matrix.len() {
            write!(w, ",{j}")?;
        }
        writeln!(w)?;
        for (i, row) in matrix.iter().enumerate() {
            write!(w, "{i}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_tokens_csv<W: Write>(tokens: &[TokenDynamics], mut w: W) -> std::io::Result<()> {
        writeln!(w, "token_position,decode_step,pre_mean,post_mean,max_change_step")?;
        for t in tokens {
            let post = t.post_mean.map_or(String::new(), |v| v.to_string());
            writeln!(w, "{},{},{},{},{}", t.token_position, t.decode_step, t.pre_mean, post, t.max_change_step)?;
        }
        Ok(())
    }

    pub fn write_extremes_csv<W: Write>(tokens: &[TokenDynamics], mut w: W) -> std::io::Result<()> {
        writeln!(w, "token_position,decode_step,largest_1,largest_2,smallest_1,smallest_2")?;
        let cell = |v: &[usize], i: usize| v.get(i).map_or(String::new(), |s| s.to_string());
        for t in tokens {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                t.token_position,
                t.decode_step,
                cell(&t.top_largest, 0),
                cell(&t.top_largest, 1),
                cell(&t.top_smallest, 0),
                cell(&t.top_smallest, 1)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{KvSnapshot, StepRecord};

    fn snap_trace(values: &[[f32; 2]], decoded: &[Vec<usize>]) -> StepTrace {
        StepTrace {
            records: values
                .iter()
                .zip(decoded)
                .enumerate()
                .map(|(step, (v, d))| StepRecord {
                    step,
                    masked: 0,
                    decoded: d.clone(),
                    compute_rows: 2,
                    cached_rows: 0,
                    seq_len: 2,
                    refresh: false,
                    millis: None,
                    macs: 0,
                    snapshot: Some(KvSnapshot {
                        layer: 0,
                        keys: Matrix::from_vec(2, 1, v.to_vec()),
                        values: Matrix::from_vec(2, 1, v.to_vec()),
                    }),
                })
                .collect(),
        }
    }

    #[test]
    fn matrices_are_symmetric_with_zero_diagonal() {
        let t = snap_trace(&[[0.0, 1.0], [3.0, 1.0], [3.0, 5.0], [4.0, 5.0]], &[vec![0], vec![], vec![1], vec![]]);
        let d = kv_dynamics(&t).unwrap();
        for m in [&d.key_euclidean, &d.key_cosine, &d.value_euclidean] {
            for i in 0..4 {
                assert_eq!(m[i][i], 0.0);
                for j in 0..4 {
                    assert_eq!(m[i][j].to_bits(), m[j][i].to_bits());
                }
            }
        }
        // rows move by (3,0) between step 0 and 1: mean distance 1.5
        assert!((d.key_euclidean[0][1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn token_stats_find_reveal_spike() {
        // token 0 decoded at step 0, its row jumps at step 1 then stays still.
        let t = snap_trace(&[[0.0, 1.0], [3.0, 1.0], [3.0, 5.0], [3.0, 5.5]], &[vec![0], vec![], vec![1], vec![]]);
        let d = kv_dynamics(&t).unwrap();
        let tok0 = &d.key_tokens[0];
        assert_eq!(tok0.token_position, 0);
        assert_eq!(tok0.reveal_change, Some(3.0));
        assert_eq!(tok0.max_change_step, 1);
        assert_eq!(tok0.post_mean, Some(0.0));
        assert_eq!(tok0.top_largest, vec![1, 2]);
        let tok1 = &d.key_tokens[1];
        assert_eq!(tok1.decode_step, 2);
        assert_eq!(tok1.reveal_change, Some(0.5));
        assert!((tok1.pre_mean - 2.0).abs() < 1e-12);
        assert_eq!(Dynamics::reveal_spike_fraction(&d.key_tokens), Some(0.5));
    }

    #[test]
    fn unchanged_rows_contribute_zero() {
        let t = snap_trace(&[[1.0, 2.0], [1.0, 2.0]], &[vec![0], vec![1]]);
        let d = kv_dynamics(&t).unwrap();
        assert_eq!(d.key_euclidean[0][1], 0.0);
        assert_eq!(d.key_cosine[0][1], 0.0);
    }

    #[test]
    fn missing_snapshots_error() {
        let mut t = snap_trace(&[[1.0, 2.0]], &[vec![0]]);
        t.records[0].snapshot = None;
        assert!(matches!(kv_dynamics(&t), Err(AnalysisError::MissingSnapshots)));
    }

    #[test]
    fn csv_shapes() {
        let t = snap_trace(&[[0.0, 1.0], [3.0, 1.0], [3.0, 5.0]], &[vec![0], vec![1], vec![]]);
        let d = kv_dynamics(&t).unwrap();
        let mut buf = Vec::new();
        Dynamics::write_matrix_csv(&d.key_euclidean, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "step,0,1,2");
        let mut buf = Vec::new();
        Dynamics::write_tokens_csv(&d.key_tokens, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("token_position,decode_step,pre_mean,post_mean,max_change_step\n"));
    }
}
