use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Result, SamplerError};

/// Linear survival schedule: `ᾱ(t) = 1 − t/T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub total_steps: usize,
}

impl NoiseSchedule {
    pub fn new(total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(SamplerError::InvalidConfig("total_steps must be >= 1".into()));
        }
        Ok(Self { total_steps })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        alpha_bar(t, self.total_steps)
    }

    /// Per-step masking probability, with `ᾱ_t = Π_{i≤t} (1 − β_i)`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.total_steps {
            return Err(SamplerError::TimeOutOfRange {
                t,
                total: self.total_steps,
            });
        }
        Ok(1.0 / (self.total_steps - t + 1) as f64)
    }

    /// `c(t) = t / T`.
    pub fn continuous_time(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(SamplerError::TimeOutOfRange {
                t,
                total: self.total_steps,
            });
        }
        Ok(t as f64 / self.total_steps as f64)
    }
}

pub fn alpha_bar(t: usize, total: usize) -> Result<f64> {
    if total == 0 || t > total {
        return Err(SamplerError::TimeOutOfRange { t, total });
    }
    Ok(1.0 - t as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAlloc {
    /// Tokens finalised this step.
    pub tokens: usize,
    /// Index of the block this step decodes in.
    pub block: usize,
}

/// How many tokens each step finalises and in which block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub steps: Vec<StepAlloc>,
    /// Block spans as offsets into the generation region.
    pub blocks: Vec<Range<usize>>,
}

impl StepSchedule {
    pub fn tokens_per_step(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.tokens).collect()
    }

    pub fn steps_per_block(&self) -> Vec<usize> {
        let mut out = vec![0; self.blocks.len()];
        for s in &self.steps {
            out[s.block] += 1;
        }
        out
    }
}

/// Split `total` into parts proportional to `weights`, flooring each share
/// and handing the leftover units to the largest remainders (lowest index on
/// ties).
fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let denom: usize = weights.iter().sum();
    let mut parts: Vec<usize> = weights.iter().map(|w| total * w / denom).collect();
    let mut rems: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (total * w % denom, i)).collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let leftover = total - parts.iter().sum::<usize>();
    for &(_, i) in rems.iter().take(leftover) {
        parts[i] += 1;
    }
    parts
}

/// Contiguous blocks of `block_size` generation positions (the last may be
/// shorter); steps are shared among blocks in proportion to their length and
/// each block's tokens are spread over its steps, both by largest remainder.
pub fn tokens_per_step_schedule(gen_len: usize, steps: usize, block_size: usize) -> Result<StepSchedule> {
    if gen_len == 0 || steps == 0 || block_size == 0 {
        return Err(SamplerError::InvalidConfig("gen_len, steps and block_size must be >= 1".into()));
    }
    if block_size > gen_len {
        return Err(SamplerError::InvalidConfig(format!(
            "block_size ({block_size}) exceeds gen_len ({gen_len})"
        )));
    }
    if steps > gen_len {
        return Err(SamplerError::InfeasibleSchedule(format!(
            "{steps} steps for {gen_len} tokens leaves some step with nothing to decode"
        )));
    }
    let blocks: Vec<Range<usize>> = (0..gen_len)
        .step_by(block_size)
        .map(|s| s..(s + block_size).min(gen_len))
        .collect();
    let lens: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
    let per_block = largest_remainder(steps, &lens);
    let mut out = Vec::with_capacity(steps);
    for (b, (&n_steps, &len)) in per_block.iter().zip(&lens).enumerate() {
        if n_steps == 0 || n_steps > len {
            return Err(SamplerError::InfeasibleSchedule(format!(
                "block {b} of {len} tokens would get {n_steps} steps"
            )));
        }
        for k in largest_remainder(len, &vec![1; n_steps]) {
            out.push(StepAlloc { tokens: k, block: b });
        }
    }
    Ok(StepSchedule { steps: out, blocks })
}
