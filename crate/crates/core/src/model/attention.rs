use super::{ModelError, Result};
use crate::par;
use crate::tensor::{softmax_into, Matrix};

/// One contiguous run of key/value rows. Attention walks segments in order,
/// which is how the cached-left/fresh-right layout is consumed without copying.
#[derive(Clone, Copy, Debug)]
pub struct KvSegment<'a> {
    pub keys: &'a Matrix,
    pub values: &'a Matrix,
}

fn check(queries: &Matrix, segments: &[KvSegment<'_>], n_heads: usize) -> Result<usize> {
    let mut total = 0;
    for s in segments {
        if s.keys.rows() != s.values.rows() {
            return Err(ModelError::Shape(format!(
                "{} key rows vs {} value rows",
                s.keys.rows(),
                s.values.rows()
            )));
        }
        if s.keys.rows() > 0 && (s.keys.cols() != queries.cols() || s.values.cols() != queries.cols()) {
            return Err(ModelError::Shape("key/value width differs from query width".into()));
        }
        total += s.keys.rows();
    }
    if total == 0 {
        return Err(ModelError::EmptyKeys);
    }
    if n_heads == 0 || !queries.cols().is_multiple_of(n_heads) {
        return Err(ModelError::Shape(format!(
            "width {} not divisible into {n_heads} heads",
            queries.cols()
        )));
    }
    Ok(total)
}

/// Bidirectional multi-head attention; every query sees every key row.
pub fn attention(
    queries: &Matrix,
    segments: &[KvSegment<'_>],
    n_heads: usize,
    scale: f32,
) -> Result<Matrix> {
    let n_keys = check(queries, segments, n_heads)?;
    let d_head = queries.cols() / n_heads;
    let mut out = Matrix::zeros(queries.rows(), queries.cols());
    let cols = out.cols();
    par::for_each_row(out.as_mut_slice(), cols, |qi, out_row| {
        let mut scores = vec![0.0f32; n_keys];
        let mut probs = vec![0.0f32; n_keys];
        attend_row(queries.row(qi), segments, d_head, scale, &mut scores, &mut probs, out_row);
    });
    Ok(out)
}

fn attend_row(
    q: &[f32],
    segments: &[KvSegment<'_>],
    d_head: usize,
    scale: f32,
    scores: &mut [f32],
    probs: &mut [f32],
    out_row: &mut [f32],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { attend_row_avx2(q, segments, d_head, scale, scores, probs, out_row) };
            return;
        }
    }
    attend_row_generic(q, segments, d_head, scale, scores, probs, out_row);
}

/// No FMA, so results match the generic build bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attend_row_avx2(
    q: &[f32],
    segments: &[KvSegment<'_>],
    d_head: usize,
    scale: f32,
    scores: &mut [f32],
    probs: &mut [f32],
    out_row: &mut [f32],
) {
    attend_row_generic(q, segments, d_head, scale, scores, probs, out_row);
}

/// Dot product with eight running sums in a fixed order.
#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline(always)]
fn attend_row_generic(
    q: &[f32],
    segments: &[KvSegment<'_>],
    d_head: usize,
    scale: f32,
    scores: &mut [f32],
    probs: &mut [f32],
    out_row: &mut [f32],
) {
    for (h, (qh, oh)) in q.chunks_exact(d_head).zip(out_row.chunks_exact_mut(d_head)).enumerate() {
        let span = h * d_head..(h + 1) * d_head;
        let mut j = 0;
        for s in segments {
            for r in 0..s.keys.rows() {
                scores[j] = dot(qh, &s.keys.row(r)[span.clone()]) * scale;
                j += 1;
            }
        }
        softmax_into(scores, probs);
        let mut j = 0;
        for s in segments {
            for r in 0..s.values.rows() {
                let p = probs[j];
                for (o, v) in oh.iter_mut().zip(&s.values.row(r)[span.clone()]) {
                    *o += p * v;
                }
                j += 1;
            }
        }
    }
}

/// Attention weights `[head][query][key]`, for inspection and tests.
pub fn attention_weights(
    queries: &Matrix,
    segments: &[KvSegment<'_>],
    n_heads: usize,
    scale: f32,
) -> Result<Vec<Vec<Vec<f32>>>> {
    let n_keys = check(queries, segments, n_heads)?;
    let d_head = queries.cols() / n_heads;
    Ok((0..n_heads)
        .map(|h| {
            let span = h * d_head..(h + 1) * d_head;
            (0..queries.rows())
                .map(|qi| {
                    let qh = &queries.row(qi)[span.clone()];
                    let scores: Vec<f32> = segments
                        .iter()
                        .flat_map(|s| (0..s.keys.rows()).map(move |r| s.keys.row(r)))
                        .map(|k| dot(qh, &k[span.clone()]) * scale)
                        .collect();
                    let mut p = vec![0.0; n_keys];
                    softmax_into(&scores, &mut p);
                    p
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg<'a>(k: &'a Matrix, v: &'a Matrix) -> [KvSegment<'a>; 1] {
        [KvSegment { keys: k, values: v }]
    }

    /// Two-loop reference: scores, then weighted sum, one head at a time.
    fn naive(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, scale: f32) -> Matrix {
        let dh = q.cols() / heads;
        let mut out = Matrix::zeros(q.rows(), q.cols());
        for i in 0..q.rows() {
            for h in 0..heads {
                let mut s = Vec::new();
                for j in 0..k.rows() {
                    let mut acc = 0.0f64;
                    for c in h * dh..(h + 1) * dh {
                        acc += q.row(i)[c] as f64 * k.row(j)[c] as f64;
                    }
                    s.push(acc * scale as f64);
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in h * dh..(h + 1) * dh {
                    let mut acc = 0.0f64;
                    for j in 0..k.rows() {
                        acc += e[j] / z * v.row(j)[c] as f64;
                    }
                    out.row_mut(i)[c] = acc as f32;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let k = Matrix::from_vec(1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        let v = Matrix::from_vec(1, 4, vec![4.0, 5.0, 6.0, 7.0]);
        let out = attention(&q, &seg(&k, &v), 2, 0.5).unwrap();
        assert_eq!(out.as_slice(), v.as_slice());
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let k = Matrix::from_rows(4, &[[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]);
        let v = Matrix::from_rows(4, &[[2.0, 4.0, 6.0, 8.0], [0.0, 2.0, 4.0, 10.0]]);
        let out = attention(&q, &seg(&k, &v), 1, 0.5).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 3.0, 5.0, 9.0]);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(&mut rng, 4, 8);
        let k = random(&mut rng, 4, 8);
        let v = random(&mut rng, 4, 8);
        let scale = 1.0 / 2.0f32.sqrt();
        for heads in [1, 2, 4] {
            let fast = attention(&q, &seg(&k, &v), heads, scale).unwrap();
            let slow = naive(&q, &k, &v, heads, scale);
            assert!(fast.max_abs_diff(&slow) <= 1e-6, "heads={heads}");
        }
    }

    #[test]
    fn segments_equal_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, 3, 8);
        let k1 = random(&mut rng, 2, 8);
        let v1 = random(&mut rng, 2, 8);
        let k2 = random(&mut rng, 3, 8);
        let v2 = random(&mut rng, 3, 8);
        let mut k = k1.clone();
        k.append_rows(&k2);
        let mut v = v1.clone();
        v.append_rows(&v2);
        let split = [
            KvSegment { keys: &k1, values: &v1 },
            KvSegment { keys: &k2, values: &v2 },
        ];
        let a = attention(&q, &split, 2, 0.5).unwrap();
        let b = attention(&q, &seg(&k, &v), 2, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, 5, 8);
        let k = random(&mut rng, 7, 8);
        let v = random(&mut rng, 7, 8);
        for head in attention_weights(&q, &seg(&k, &v), 2, 0.5).unwrap() {
            for row in head {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn empty_keys_rejected() {
        let q = Matrix::zeros(1, 4);
        let k = Matrix::zeros(0, 4);
        assert!(matches!(attention(&q, &seg(&k, &k), 1, 1.0), Err(ModelError::EmptyKeys)));
    }
}
