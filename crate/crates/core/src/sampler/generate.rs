use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::predict::{predict_x0, select_to_unmask, Remasking};
use super::schedule::{tokens_per_step_schedule, StepSchedule};
use super::{Result, SamplerError};
use crate::analysis::{KvSnapshot, StepRecord, StepTrace};
use crate::cache::{scatter_outputs, CacheConfig, CacheEngine, ComputePlan, Fault, LayoutRecord, PlanInput, PositionLogits};
use crate::model::{KvSlab, ModelWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub gen_len: usize,
    pub steps: usize,
    pub block_size: usize,
    #[serde(default)]
    pub remasking: Remasking,
    #[serde(default)]
    pub temperature: f32,
    #[serde(default)]
    pub sample_seed: u64,
    /// Set in code; run configs carry the cache settings separately.
    #[serde(skip)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub snapshot_layer: Option<usize>,
}

impl SamplerConfig {
    pub fn new(gen_len: usize, steps: usize, block_size: usize) -> Self {
        Self {
            gen_len,
            steps,
            block_size,
            remasking: Remasking::default(),
            temperature: 0.0,
            sample_seed: 0,
            cache: CacheConfig::default(),
            snapshot_layer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(SamplerError::NegativeTemperature(self.temperature));
        }
        // Greedy plans the compute set from the positions the step will
        // decode, so that set has to be known before the forward pass.
        if self.cache.variant.is_greedy() && self.remasking != Remasking::Random {
            return Err(SamplerError::InvalidConfig(
                "greedy caching needs random remasking (decode order fixed in advance)".into(),
            ));
        }
        tokens_per_step_schedule(self.gen_len, self.steps, self.block_size)?;
        Ok(())
    }
}

/// Extra bookkeeping, mostly for tests and the CLI.
#[derive(Clone, Copy, Debug, Default)]
pub struct GenerateOptions {
    /// Record per-step wall time in the trace.
    pub timing: bool,
    /// Keep one [`LayoutRecord`] per step.
    pub record_layout: bool,
    /// Keep the scattered logits and fresh K/V rows of the latest step.
    pub keep_forward: bool,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug)]
pub struct GenerationState {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// Generation positions still masked.
    pub masked: BTreeSet<usize>,
    pub decoded_this_step: Vec<usize>,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct GenerationOutput {
    pub sequence: Vec<u32>,
    pub prompt_len: usize,
    pub trace: StepTrace,
    pub layout: Vec<LayoutRecord>,
}

impl GenerationOutput {
    pub fn generated(&self) -> &[u32] {
        &self.sequence[self.prompt_len..]
    }
}

/// A failed run, with the trace of the steps that did complete.
#[derive(Debug)]
pub struct GenerateFailure {
    pub error: SamplerError,
    pub trace: StepTrace,
    pub layout: Vec<LayoutRecord>,
}

/// Step-by-step driver of one generation.
pub struct Generator<'w> {
    weights: &'w ModelWeights,
    config: SamplerConfig,
    options: GenerateOptions,
    schedule: StepSchedule,
    /// Decode order per step when it does not depend on the model.
    order: Option<Vec<Vec<usize>>>,
    state: GenerationState,
    engine: CacheEngine,
    prev_masked: Option<BTreeSet<usize>>,
    trace: StepTrace,
    layout_log: Vec<LayoutRecord>,
    last_logits: Option<PositionLogits>,
    last_fresh: Option<Vec<KvSlab>>,
    last_plan: Option<ComputePlan>,
}

impl<'w> Generator<'w> {
    pub fn new(weights: &'w ModelWeights, config: SamplerConfig, prompt: &[u32], options: GenerateOptions) -> Result<Self> {
        config.validate()?;
        let model = weights.config();
        if let Some(layer) = config.snapshot_layer {
            if layer >= model.n_layers {
                return Err(SamplerError::InvalidConfig(format!(
                    "snapshot_layer {layer} but the model has {} layers",
                    model.n_layers
                )));
            }
        }
        if let Some(i) = prompt.iter().position(|&id| id == model.mask_token_id) {
            return Err(SamplerError::InvalidConfig(format!("prompt position {i} holds the mask token")));
        }
        if let Some(i) = prompt.iter().position(|&id| id as usize >= model.vocab_size) {
            return Err(SamplerError::InvalidConfig(format!(
                "prompt token {} at position {i} outside vocabulary of {}",
                prompt[i], model.vocab_size
            )));
        }
        let seq_len = prompt.len() + config.gen_len;
        if seq_len > model.max_positions {
            return Err(SamplerError::InvalidConfig(format!(
                "prompt ({}) + gen_len ({}) exceeds max_positions ({})",
                prompt.len(),
                config.gen_len,
                model.max_positions
            )));
        }
        if model.shifted_output && prompt.is_empty() {
            return Err(SamplerError::InvalidConfig(
                "a shifted-output model needs at least one prompt token".into(),
            ));
        }
        let schedule = tokens_per_step_schedule(config.gen_len, config.steps, config.block_size)?;
        let prompt_len = prompt.len();
        let order = (config.remasking == Remasking::Random).then(|| random_order(&schedule, prompt_len, config.sample_seed));
        let mut tokens = prompt.to_vec();
        tokens.resize(seq_len, model.mask_token_id);
        let mut engine = CacheEngine::new(config.cache, seq_len, model)?;
        engine.inject_fault(options.fault);
        Ok(Self {
            weights,
            config,
            options,
            schedule,
            order,
            state: GenerationState {
                tokens,
                prompt_len,
                masked: (prompt_len..seq_len).collect(),
                decoded_this_step: Vec::new(),
                step: 0,
                rng: ChaCha8Rng::seed_from_u64(config.sample_seed),
            },
            engine,
            prev_masked: None,
            trace: StepTrace::default(),
            layout_log: Vec::new(),
            last_logits: None,
            last_fresh: None,
            last_plan: None,
        })
    }

    pub fn weights(&self) -> &'w ModelWeights {
        self.weights
    }

    pub fn state(&self) -> &GenerationState {
        &self.state
    }

    pub fn engine(&self) -> &CacheEngine {
        &self.engine
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    pub fn trace(&self) -> &StepTrace {
        &self.trace
    }

    pub fn layout_log(&self) -> &[LayoutRecord] {
        &self.layout_log
    }

    /// Logits of the latest step by position; needs `keep_forward`.
    pub fn last_logits(&self) -> Option<&PositionLogits> {
        self.last_logits.as_ref()
    }

    /// K/V rows computed by the latest step, per layer in compute-set order;
    /// needs `keep_forward`.
    pub fn last_fresh_kv(&self) -> Option<&[KvSlab]> {
        self.last_fresh.as_deref()
    }

    pub fn last_plan(&self) -> Option<&ComputePlan> {
        self.last_plan.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.schedule.steps.len()
    }

    /// Run one denoising step and return its trace record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        if self.is_finished() {
            return Err(SamplerError::Finished);
        }
        let t = self.state.step;
        let started = self.options.timing.then(Instant::now);
        let model = self.weights.config();
        let seq_len = self.state.tokens.len();

        let plan = self.engine.begin_step(t)?;
        let out = self.engine.forward(self.weights, &self.state.tokens, &plan)?;
        let snapshot = self.config.snapshot_layer.map(|layer| {
            let (keys, values) = self.engine.natural_kv(layer, &out.fresh_kv);
            KvSnapshot { layer, keys, values }
        });
        let logits = scatter_outputs(&plan.compute_set, out.logits, seq_len)?;

        let alloc = self.schedule.steps[t];
        let block = &self.schedule.blocks[alloc.block];
        let span = (self.state.prompt_len + block.start)..(self.state.prompt_len + block.end);
        let row_for = |q: usize| if model.shifted_output { q - 1 } else { q };
        let exclude = Some(model.mask_token_id);

        let (decoded, proposals) = match &self.order {
            Some(order) => {
                let decoded = order[t].clone();
                let rows = decoded
                    .iter()
                    .map(|&q| Ok((q, logits.get(row_for(q)).ok_or(SamplerError::MissingLogits(q))?)))
                    .collect::<Result<Vec<_>>>()?;
                let proposals = predict_x0(&rows, self.config.temperature, exclude, &mut self.state.rng)?;
                (decoded, proposals)
            }
            None => {
                let rows = self
                    .state
                    .masked
                    .range(span)
                    .map(|&q| Ok((q, logits.get(row_for(q)).ok_or(SamplerError::MissingLogits(q))?)))
                    .collect::<Result<Vec<_>>>()?;
                let proposals = predict_x0(&rows, self.config.temperature, exclude, &mut self.state.rng)?;
                let decoded = select_to_unmask(&proposals, self.config.remasking, alloc.tokens, &mut self.state.rng)?;
                (decoded, proposals)
            }
        };

        let masked_start = self.state.masked.clone();
        for p in &proposals {
            if decoded.binary_search(&p.position).is_ok() {
                if !self.state.masked.remove(&p.position) {
                    return Err(SamplerError::InvalidConfig(format!(
                        "position {} decoded twice",
                        p.position
                    )));
                }
                self.state.tokens[p.position] = p.token;
            }
        }
        let masked_before = masked_start.len();
        self.prev_masked = Some(masked_start);
        let masked_now = std::mem::take(&mut self.state.masked);

        let next_order = self.order.as_ref().and_then(|o| o.get(t + 1));
        let next_input = (t + 1 < self.schedule.steps.len()).then(|| PlanInput {
            step: t + 1,
            seq_len,
            prompt_len: self.state.prompt_len,
            masked: &masked_now,
            prev_masked: self.prev_masked.as_ref(),
            decoded_now: next_order.map(|v| v.as_slice()),
            decoded_prev: &decoded,
            shifted_output: model.shifted_output,
        });
        self.engine.finish_step(&plan, &out.fresh_kv, next_input.as_ref())?;
        self.state.masked = masked_now;

        if self.options.record_layout {
            self.layout_log.push(LayoutRecord {
                step: t,
                cached_positions: plan.cached_positions.clone(),
                compute_set: plan.compute_set.clone(),
                refresh: plan.refresh,
            });
        }
        self.trace.records.push(StepRecord {
            step: t,
            masked: masked_before,
            decoded: decoded.clone(),
            compute_rows: plan.compute_set.len(),
            cached_rows: plan.cached_positions.len(),
            seq_len,
            refresh: plan.refresh,
            millis: started.map(|s| s.elapsed().as_secs_f64() * 1000.0),
            macs: plan.compute_set.len() as u64 * model.macs_per_row(seq_len),
            snapshot,
        });
        if self.options.keep_forward {
            self.last_logits = Some(logits);
            self.last_fresh = Some(out.fresh_kv);
        }
        self.last_plan = Some(plan);
        self.state.decoded_this_step = decoded;
        self.state.step += 1;
        Ok(self.trace.records.last().expect("record just pushed"))
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> GenerationOutput {
        GenerationOutput {
            sequence: self.state.tokens,
            prompt_len: self.state.prompt_len,
            trace: self.trace,
            layout: self.layout_log,
        }
    }

    fn fail(self, error: SamplerError) -> GenerateFailure {
        GenerateFailure {
            error,
            trace: self.trace,
            layout: self.layout_log,
        }
    }
}

/// Decode order for random remasking, drawn from its own stream so it does
/// not depend on token sampling (or on the model at all).
fn random_order(schedule: &StepSchedule, prompt_len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut remaining: Vec<BTreeSet<usize>> = schedule
        .blocks
        .iter()
        .map(|b| (prompt_len + b.start..prompt_len + b.end).collect())
        .collect();
    schedule
        .steps
        .iter()
        .map(|alloc| {
            let pool = &mut remaining[alloc.block];
            let proposals: Vec<_> = pool
                .iter()
                .map(|&position| super::Proposal {
                    position,
                    token: 0,
                    confidence: 0.0,
                    margin: 0.0,
                })
                .collect();
            let picked = select_to_unmask(&proposals, Remasking::Random, alloc.tokens, &mut rng)
                .expect("schedule never asks for more tokens than the block holds");
            for p in &picked {
                pool.remove(p);
            }
            picked
        })
        .collect()
}

/// Run a whole generation. On failure the trace of completed steps is kept.
pub fn generate(
    weights: &ModelWeights,
    config: SamplerConfig,
    prompt: &[u32],
    options: GenerateOptions,
) -> std::result::Result<GenerationOutput, GenerateFailure> {
    let mut g = Generator::new(weights, config, prompt, options).map_err(|error| GenerateFailure {
        error,
        trace: StepTrace::default(),
        layout: Vec::new(),
    })?;
    match g.run() {
        Ok(()) => Ok(g.finish()),
        Err(e) => Err(g.fail(e)),
    }
}
