use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::layout::{build_layout, concat_reorder, ComputePlan, Layout};
use super::plan::{plan_compute_set, PlanInput};
use super::{CacheConfig, CacheError, ExecPath, Result};
use crate::model::{forward_partial, ForwardResult, KvSlab, ModelConfig, ModelWeights};
use crate::tensor::Matrix;

/// Deliberate corruption used by the self-test to prove the soundness checks
/// fire.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ReorderIndex,
}

/// One line of the per-step cache layout dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutRecord {
    pub step: usize,
    pub cached_positions: Vec<usize>,
    pub compute_set: Vec<usize>,
    pub refresh: bool,
}

#[derive(Debug)]
enum Store {
    /// One slab per layer; all slabs share `row_positions`.
    Layout(Vec<KvSlab>),
    /// Natural-order buffers plus the ascending list of valid cached rows.
    Natural {
        keys: Vec<Matrix>,
        values: Vec<Matrix>,
        cached: Vec<usize>,
    },
}

/// Owns the per-layer cache for one generation.
#[derive(Debug)]
pub struct CacheEngine {
    config: CacheConfig,
    seq_len: usize,
    n_layers: usize,
    width: usize,
    store: Store,
    pending: Option<(Vec<usize>, bool)>,
    fault: Option<Fault>,
}

impl CacheEngine {
    pub fn new(config: CacheConfig, seq_len: usize, model: &ModelConfig) -> Result<Self> {
        config.validate(model.shifted_output)?;
        let width = model.d_model;
        let store = match config.path {
            ExecPath::Reorder => Store::Layout((0..model.n_layers).map(|l| KvSlab::empty(l, width)).collect()),
            ExecPath::Naive => Store::Natural {
                keys: vec![Matrix::zeros(seq_len, width); model.n_layers],
                values: vec![Matrix::zeros(seq_len, width); model.n_layers],
                cached: Vec::new(),
            },
        };
        Ok(Self {
            config,
            seq_len,
            n_layers: model.n_layers,
            width,
            store,
            pending: None,
            fault: None,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Positions currently held in cache, in storage order.
    pub fn cached_positions(&self) -> Vec<usize> {
        match &self.store {
            Store::Layout(slabs) => slabs[0].row_positions.clone(),
            Store::Natural { cached, .. } => cached.clone(),
        }
    }

    /// The cached rows of every layer, in storage order.
    pub fn cached_slabs(&self) -> Vec<KvSlab> {
        match &self.store {
            Store::Layout(slabs) => slabs.clone(),
            Store::Natural { .. } => self.gather_natural(),
        }
    }

    fn gather_natural(&self) -> Vec<KvSlab> {
        let Store::Natural { keys, values, cached } = &self.store else {
            unreachable!()
        };
        (0..self.n_layers)
            .map(|l| KvSlab {
                layer: l,
                keys: keys[l].gather_rows(cached),
                values: values[l].gather_rows(cached),
                row_positions: cached.clone(),
            })
            .collect()
    }

    /// Plan step `step`. The first step computes everything; later steps use
    /// the plan fixed when the previous step finished.
    pub fn begin_step(&mut self, step: usize) -> Result<ComputePlan> {
        let cached_positions = self.cached_positions();
        let (compute_set, refresh) = if step == 0 {
            if !cached_positions.is_empty() {
                return Err(CacheError::LayoutUnsound("cache not empty at first step".into()));
            }
            ((0..self.seq_len).collect(), false)
        } else {
            self.pending
                .clone()
                .ok_or_else(|| CacheError::LayoutUnsound(format!("no plan prepared for step {step}")))?
        };
        let plan = ComputePlan {
            step,
            compute_set,
            cached_positions,
            refresh,
        };
        if plan.seq_len() != self.seq_len {
            return Err(CacheError::LayoutUnsound(format!(
                "step {step}: {} cached + {} computed rows != sequence length {}",
                plan.cached_positions.len(),
                plan.compute_set.len(),
                self.seq_len
            )));
        }
        plan.check_sound()?;
        Ok(plan)
    }

    pub fn forward(&self, weights: &ModelWeights, tokens: &[u32], plan: &ComputePlan) -> Result<ForwardResult> {
        let out = match &self.store {
            Store::Layout(slabs) => forward_partial(weights, tokens, &plan.compute_set, slabs)?,
            Store::Natural { .. } => forward_partial(weights, tokens, &plan.compute_set, &self.gather_natural())?,
        };
        Ok(out)
    }

    /// Keys and values seen by attention at `layer` this step, scattered to
    /// natural position order. Call before [`finish_step`](Self::finish_step).
    pub fn natural_kv(&self, layer: usize, fresh: &[KvSlab]) -> (Matrix, Matrix) {
        let mut keys = Matrix::zeros(self.seq_len, self.width);
        let mut values = Matrix::zeros(self.seq_len, self.width);
        let mut put = |slab: &KvSlab| {
            for (r, &p) in slab.row_positions.iter().enumerate() {
                keys.row_mut(p).copy_from_slice(slab.keys.row(r));
                values.row_mut(p).copy_from_slice(slab.values.row(r));
            }
        };
        match &self.store {
            Store::Layout(slabs) => put(&slabs[layer]),
            Store::Natural { .. } => put(&self.gather_natural()[layer]),
        }
        put(&fresh[layer]);
        (keys, values)
    }

    /// Fold this step's fresh rows into the cache and fix the next step's
    /// plan. `next` is `None` after the final step. Returns the layout used,
    /// including the reorder index, for the layout path.
    pub fn finish_step(
        &mut self,
        plan: &ComputePlan,
        fresh: &[KvSlab],
        next: Option<&PlanInput<'_>>,
    ) -> Result<Option<Layout>> {
        let Some(next) = next else {
            self.pending = None;
            return Ok(None);
        };
        if fresh.len() != self.n_layers {
            return Err(CacheError::LayoutUnsound(format!(
                "{} fresh slabs for {} layers",
                fresh.len(),
                self.n_layers
            )));
        }
        let (next_compute, next_refresh) = plan_compute_set(&self.config, next)?;
        let computed: BTreeSet<usize> = next_compute.iter().copied().collect();
        let next_cached: BTreeSet<usize> = (0..self.seq_len).filter(|p| !computed.contains(p)).collect();
        let layout = build_layout(&plan.compute_set, &plan.cached_positions, &next_cached)?;

        match &mut self.store {
            Store::Layout(slabs) => {
                let mut index = layout.reorder_index.clone();
                if self.fault == Some(Fault::ReorderIndex) && index.pop().is_none() && !layout.layout.is_empty() {
                    index.push(0);
                }
                for (l, slab) in slabs.iter_mut().enumerate() {
                    let cached = std::mem::replace(slab, KvSlab::empty(l, self.width));
                    let (_, next_slab) = concat_reorder(cached, &fresh[l], &index)?;
                    *slab = next_slab;
                }
            }
            Store::Natural { keys, values, cached } => {
                for (l, slab) in fresh.iter().enumerate() {
                    for (r, &p) in slab.row_positions.iter().enumerate() {
                        keys[l].row_mut(p).copy_from_slice(slab.keys.row(r));
                        values[l].row_mut(p).copy_from_slice(slab.values.row(r));
                    }
                }
                *cached = next_cached.into_iter().collect();
            }
        }
        self.pending = Some((next_compute, next_refresh));
        Ok(Some(layout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheVariant;
    use crate::model::forward_full;

    fn tokens() -> Vec<u32> {
        vec![3, 7, 31, 31, 12, 31, 0, 5]
    }

    fn run_two_steps(path: ExecPath) -> (ComputePlan, ForwardResult, Vec<usize>) {
        let model = ModelConfig::tiny();
        let w = ModelWeights::init(&model).unwrap();
        let cfg = CacheConfig {
            variant: CacheVariant::Decode { refresh_interval: None },
            path,
            ..CacheConfig::default()
        };
        let mut e = CacheEngine::new(cfg, 8, &model).unwrap();
        let t = tokens();
        let p0 = e.begin_step(0).unwrap();
        let r0 = e.forward(&w, &t, &p0).unwrap();
        let prev: BTreeSet<usize> = [0, 1, 3, 6, 7].into();
        // Positions 2, 4 and 5 were never masked, so step 1 serves them from cache.
        let next = PlanInput {
            step: 1,
            seq_len: 8,
            prompt_len: 0,
            masked: &prev,
            prev_masked: Some(&prev),
            decoded_now: None,
            decoded_prev: &[],
            shifted_output: false,
        };
        e.finish_step(&p0, &r0.fresh_kv, Some(&next)).unwrap();
        let p1 = e.begin_step(1).unwrap();
        let r1 = e.forward(&w, &t, &p1).unwrap();
        (p1, r1, e.cached_positions())
    }

    #[test]
    fn both_paths_agree_with_full_forward() {
        let w = ModelWeights::init(&ModelConfig::tiny()).unwrap();
        let full = forward_full(&w, &tokens()).unwrap();
        for path in [ExecPath::Reorder, ExecPath::Naive] {
            let (plan, r, cached) = run_two_steps(path);
            assert_eq!(cached, vec![2, 4, 5]);
            assert_eq!(plan.compute_set, vec![0, 1, 3, 6, 7]);
            let expected = full.logits.gather_rows(&plan.compute_set);
            assert!(r.logits.max_abs_diff(&expected) <= 1e-5, "{path:?}");
        }
    }

    #[test]
    fn missing_plan_is_unsound() {
        let model = ModelConfig::tiny();
        let mut e = CacheEngine::new(CacheConfig::default(), 8, &model).unwrap();
        assert!(matches!(e.begin_step(3), Err(CacheError::LayoutUnsound(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut model = ModelConfig::tiny();
        let cfg = CacheConfig {
            shift: crate::cache::ShiftMode::RightShift,
            ..CacheConfig::default()
        };
        assert!(CacheEngine::new(cfg, 8, &model).is_err());
        model.shifted_output = true;
        assert!(CacheEngine::new(cfg, 8, &model).is_ok());
    }
}
