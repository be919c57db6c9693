use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{CacheError, Result};
use crate::model::KvSlab;
use crate::tensor::Matrix;

/// Row order for one step: cached rows on the left, fresh rows on the right.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layout: Vec<usize>,
    /// Rotary position id of each layout row; identical to `layout`.
    pub pe_order: Vec<usize>,
    /// Layout indices of the rows that stay cached for the next step.
    pub reorder_index: Vec<usize>,
}

/// Per-step plan handed to the forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputePlan {
    pub step: usize,
    pub compute_set: Vec<usize>,
    pub cached_positions: Vec<usize>,
    pub refresh: bool,
}

impl ComputePlan {
    pub fn seq_len(&self) -> usize {
        self.compute_set.len() + self.cached_positions.len()
    }

    /// `[cached ; compute]`.
    pub fn layout(&self) -> Vec<usize> {
        self.cached_positions
            .iter()
            .chain(&self.compute_set)
            .copied()
            .collect()
    }

    /// Checks that cached and computed positions tile `0..seq_len` exactly once.
    pub fn check_sound(&self) -> Result<()> {
        check_permutation(&self.layout(), self.seq_len())
    }
}

fn check_permutation(layout: &[usize], seq_len: usize) -> Result<()> {
    let mut seen = vec![false; seq_len];
    for &p in layout {
        if p >= seq_len {
            return Err(CacheError::LayoutUnsound(format!("position {p} >= sequence length {seq_len}")));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(CacheError::LayoutUnsound(format!("position {p} appears twice in layout")));
        }
    }
    Ok(())
}

/// Layout indices selecting `next_cached`, in layout order.
pub fn reorder_index(layout: &[usize], next_cached: &BTreeSet<usize>) -> Result<Vec<usize>> {
    let index: Vec<usize> = layout
        .iter()
        .enumerate()
        .filter(|(_, p)| next_cached.contains(p))
        .map(|(i, _)| i)
        .collect();
    if index.len() != next_cached.len() {
        return Err(CacheError::LayoutUnsound(format!(
            "{} positions to cache but only {} present in layout",
            next_cached.len(),
            index.len()
        )));
    }
    Ok(index)
}

/// Build `[cached ; compute]`, the matching rotary order, and the gather index
/// for the rows that remain cached next step.
pub fn build_layout(
    compute_set: &[usize],
    cached_positions: &[usize],
    next_cached: &BTreeSet<usize>,
) -> Result<Layout> {
    let seq_len = compute_set.len() + cached_positions.len();
    let layout: Vec<usize> = cached_positions.iter().chain(compute_set).copied().collect();
    check_permutation(&layout, seq_len)?;
    let reorder_index = reorder_index(&layout, next_cached)?;
    Ok(Layout {
        pe_order: layout.clone(),
        layout,
        reorder_index,
    })
}

/// Append `fresh` to `cached` (the full layout-order K/V used by attention)
/// and gather the rows at `index` as the next step's cache.
pub fn concat_reorder(mut cached: KvSlab, fresh: &KvSlab, index: &[usize]) -> Result<(KvSlab, KvSlab)> {
    if cached.layer != fresh.layer {
        return Err(CacheError::LayoutUnsound(format!(
            "concatenating layer {} with layer {}",
            cached.layer, fresh.layer
        )));
    }
    if cached.is_empty() && cached.keys.cols() != fresh.keys.cols() {
        cached = KvSlab::empty(fresh.layer, fresh.keys.cols());
    }
    cached.append(fresh);
    let len = cached.len();
    if let Some(&bad) = index.iter().find(|&&i| i >= len) {
        return Err(CacheError::ReorderOutOfBounds { index: bad, len });
    }
    let next = cached.gather(index);
    Ok((cached, next))
}

/// Logits addressed by original position. Positions outside the compute set
/// have no row.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionLogits {
    logits: Matrix,
    row_of: Vec<Option<usize>>,
}

impl PositionLogits {
    pub fn get(&self, position: usize) -> Option<&[f32]> {
        self.row_of
            .get(position)
            .copied()
            .flatten()
            .map(|r| self.logits.row(r))
    }

    pub fn has(&self, position: usize) -> bool {
        self.get(position).is_some()
    }

    pub fn seq_len(&self) -> usize {
        self.row_of.len()
    }
}

/// Put compute-set logit rows back at their sequence positions.
pub fn scatter_outputs(compute_set: &[usize], partial_logits: Matrix, seq_len: usize) -> Result<PositionLogits> {
    if partial_logits.rows() != compute_set.len() {
        return Err(CacheError::LogitRows {
            rows: partial_logits.rows(),
            expected: compute_set.len(),
        });
    }
    let mut row_of = vec![None; seq_len];
    for (r, &p) in compute_set.iter().enumerate() {
        let slot = row_of
            .get_mut(p)
            .ok_or_else(|| CacheError::LayoutUnsound(format!("position {p} >= sequence length {seq_len}")))?;
        if slot.replace(r).is_some() {
            return Err(CacheError::LayoutUnsound(format!("position {p} computed twice")));
        }
    }
    Ok(PositionLogits {
        logits: partial_logits,
        row_of,
    })
}
