use serde::{Deserialize, Serialize};

use super::attention::{attention, KvSegment};
use super::rope::rope_rotate;
use super::{ModelError, ModelWeights, Result};
use crate::par;
use crate::tensor::{gelu, rms_norm, Matrix};

const NORM_EPS: f32 = 1e-5;

/// Keys (already rotary-rotated) and values for one layer, stored in layout
/// order. `row_positions[i]` is the sequence position of row `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvSlab {
    pub layer: usize,
    pub keys: Matrix,
    pub values: Matrix,
    pub row_positions: Vec<usize>,
}

impl KvSlab {
    pub fn empty(layer: usize, width: usize) -> Self {
        Self {
            layer,
            keys: Matrix::zeros(0, width),
            values: Matrix::zeros(0, width),
            row_positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.row_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_positions.is_empty()
    }

    /// Rows `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> KvSlab {
        KvSlab {
            layer: self.layer,
            keys: self.keys.gather_rows(indices),
            values: self.values.gather_rows(indices),
            row_positions: indices.iter().map(|&i| self.row_positions[i]).collect(),
        }
    }

    /// Append `other` below `self` (no copy of the existing rows).
    pub fn append(&mut self, other: &KvSlab) {
        self.keys.append_rows(&other.keys);
        self.values.append_rows(&other.values);
        self.row_positions.extend_from_slice(&other.row_positions);
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let n = self.row_positions.len();
        if self.keys.rows() != n || self.values.rows() != n {
            return Err(ModelError::Shape(format!(
                "slab for layer {} has {} positions but {} key / {} value rows",
                self.layer,
                n,
                self.keys.rows(),
                self.values.rows()
            )));
        }
        let mut seen = vec![false; seq_len];
        for &p in &self.row_positions {
            if p >= seq_len || std::mem::replace(&mut seen[p], true) {
                return Err(ModelError::PositionSets(format!(
                    "slab row position {p} duplicated or >= sequence length {seq_len}"
                )));
            }
        }
        if !(self.keys.is_finite() && self.values.is_finite()) {
            return Err(ModelError::Shape(format!("slab for layer {} is not finite", self.layer)));
        }
        Ok(())
    }
}

/// Logits for the compute set (in its order) and the fresh K/V it produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub logits: Matrix,
    pub fresh_kv: Vec<KvSlab>,
}

/// Full bidirectional pass over every position, in natural order.
pub fn forward_full(weights: &ModelWeights, tokens: &[u32]) -> Result<ForwardResult> {
    let all: Vec<usize> = (0..tokens.len()).collect();
    forward_partial(weights, tokens, &all, &[])
}

fn check_inputs(
    weights: &ModelWeights,
    tokens: &[u32],
    compute_set: &[usize],
    cache: &[KvSlab],
) -> Result<()> {
    let cfg = weights.config();
    let s = tokens.len();
    if s > cfg.max_positions {
        return Err(ModelError::SequenceTooLong {
            len: s,
            max: cfg.max_positions,
        });
    }
    if let Some((position, &id)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= cfg.vocab_size)
    {
        return Err(ModelError::InvalidToken {
            position,
            id,
            vocab: cfg.vocab_size,
        });
    }
    let mut covered = vec![false; s];
    let cached_positions: &[usize] = match cache.first() {
        None => &[],
        Some(first) => {
            if cache.len() != cfg.n_layers {
                return Err(ModelError::CacheLayers {
                    expected: cfg.n_layers,
                    found: cache.len(),
                });
            }
            for (i, slab) in cache.iter().enumerate() {
                if slab.layer != i {
                    return Err(ModelError::Shape(format!("cache slot {i} holds layer {}", slab.layer)));
                }
                if slab.row_positions != first.row_positions {
                    return Err(ModelError::PositionSets(format!(
                        "layer {i} cache rows differ from layer 0"
                    )));
                }
                if !slab.is_empty() && slab.keys.cols() != cfg.d_model {
                    return Err(ModelError::Shape(format!(
                        "cache width {} != d_model {}",
                        slab.keys.cols(),
                        cfg.d_model
                    )));
                }
                slab.validate(s)?;
            }
            &first.row_positions
        }
    };
    for &p in cached_positions.iter().chain(compute_set) {
        if p >= s {
            return Err(ModelError::PositionSets(format!("position {p} >= sequence length {s}")));
        }
        if std::mem::replace(&mut covered[p], true) {
            return Err(ModelError::PositionSets(format!(
                "position {p} appears twice across cache and compute set"
            )));
        }
    }
    if let Some(missing) = covered.iter().position(|c| !c) {
        return Err(ModelError::PositionSets(format!(
            "position {missing} is neither cached nor computed"
        )));
    }
    Ok(())
}

/// Forward over the ordered `compute_set` only. Attention in each layer runs
/// over `[cached rows ; fresh rows]`; logits and fresh K/V come back for the
/// compute set in its given order.
pub fn forward_partial(
    weights: &ModelWeights,
    tokens: &[u32],
    compute_set: &[usize],
    cache: &[KvSlab],
) -> Result<ForwardResult> {
    check_inputs(weights, tokens, compute_set, cache)?;
    let cfg = weights.config();
    let d = cfg.d_model;
    let scale = 1.0 / (cfg.d_head as f32).sqrt();

    let rows: Vec<&[f32]> = compute_set
        .iter()
        .map(|&p| weights.embed.row(tokens[p] as usize))
        .collect();
    let mut hidden = Matrix::from_rows(d, &rows);
    let mut fresh_kv = Vec::with_capacity(cfg.n_layers);

    for (li, layer) in weights.layers.iter().enumerate() {
        let x = rms_norm(&hidden, &layer.attn_norm, NORM_EPS);
        let q = rope_rotate(&x.matmul(&layer.wq), compute_set, cfg.n_heads, cfg.rope_base, cfg.max_positions)?;
        let k = rope_rotate(&x.matmul(&layer.wk), compute_set, cfg.n_heads, cfg.rope_base, cfg.max_positions)?;
        let v = x.matmul(&layer.wv);

        let mut segments = Vec::with_capacity(2);
        if let Some(slab) = cache.get(li).filter(|s| !s.is_empty()) {
            segments.push(KvSegment {
                keys: &slab.keys,
                values: &slab.values,
            });
        }
        if !compute_set.is_empty() {
            segments.push(KvSegment { keys: &k, values: &v });
        }
        let attn = if compute_set.is_empty() {
            Matrix::zeros(0, d)
        } else {
            attention(&q, &segments, cfg.n_heads, scale)?
        };
        hidden.add_assign(&attn.matmul(&layer.wo));

        let x = rms_norm(&hidden, &layer.ffn_norm, NORM_EPS);
        let mut up = x.matmul(&layer.w_in);
        let ff = up.cols();
        par::for_each_row(up.as_mut_slice(), ff, |_, row| {
            row.iter_mut().for_each(|u| *u = gelu(*u));
        });
        hidden.add_assign(&up.matmul(&layer.w_out));

        fresh_kv.push(KvSlab {
            layer: li,
            keys: k,
            values: v,
            row_positions: compute_set.to_vec(),
        });
    }

    let logits = rms_norm(&hidden, &weights.final_norm, NORM_EPS).matmul(&weights.head);
    if !logits.is_finite() {
        return Err(ModelError::Shape("non-finite logits".into()));
    }
    Ok(ForwardResult { logits, fresh_kv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (ModelWeights, Vec<u32>) {
        let w = ModelWeights::init(&ModelConfig::tiny()).unwrap();
        let tokens = vec![3, 7, 31, 31, 12, 31, 0, 5];
        (w, tokens)
    }

    #[test]
    fn full_forward_covers_natural_order() {
        let (w, t) = setup();
        let r = forward_full(&w, &t).unwrap();
        assert_eq!(r.logits.rows(), 8);
        for slab in &r.fresh_kv {
            assert_eq!(slab.row_positions, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn full_equals_partial_over_everything() {
        let (w, t) = setup();
        let a = forward_full(&w, &t).unwrap();
        let b = forward_partial(&w, &t, &(0..8).collect::<Vec<_>>(), &[]).unwrap();
        assert_eq!(a, b);
        let c = forward_full(&w, &t).unwrap();
        assert_eq!(a.logits.as_slice(), c.logits.as_slice());
    }

    #[test]
    fn partial_with_cache_from_full_matches_full() {
        let (w, t) = setup();
        let full = forward_full(&w, &t).unwrap();
        let cached = [2usize, 4, 5];
        let compute = [0usize, 1, 3, 6, 7];
        let cache: Vec<KvSlab> = full.fresh_kv.iter().map(|s| s.gather(&cached)).collect();
        let part = forward_partial(&w, &t, &compute, &cache).unwrap();
        let expected = full.logits.gather_rows(&compute);
        assert!(part.logits.max_abs_diff(&expected) <= 1e-5);
        for slab in &part.fresh_kv {
            assert_eq!(slab.row_positions, compute);
            assert_eq!(cache[slab.layer].len() + slab.len(), 8);
        }
    }

    #[test]
    fn inconsistent_sets_are_rejected() {
        let (w, t) = setup();
        let full = forward_full(&w, &t).unwrap();
        let cache: Vec<KvSlab> = full.fresh_kv.iter().map(|s| s.gather(&[2, 4])).collect();
        // overlap
        assert!(matches!(
            forward_partial(&w, &t, &[0, 1, 2, 3, 5, 6, 7], &cache),
            Err(ModelError::PositionSets(_))
        ));
        // incomplete
        assert!(matches!(
            forward_partial(&w, &t, &[0, 1, 3, 6, 7], &cache),
            Err(ModelError::PositionSets(_))
        ));
        // layer count
        assert!(matches!(
            forward_partial(&w, &t, &[0, 1, 3, 5, 6, 7], &cache[..1]),
            Err(ModelError::CacheLayers { .. })
        ));
    }

    #[test]
    fn bad_tokens_and_lengths_are_rejected() {
        let (w, _) = setup();
        assert!(matches!(
            forward_full(&w, &[1, 99]),
            Err(ModelError::InvalidToken { position: 1, id: 99, .. })
        ));
        let long = vec![0u32; 257];
        assert!(matches!(forward_full(&w, &long), Err(ModelError::SequenceTooLong { .. })));
    }
}
