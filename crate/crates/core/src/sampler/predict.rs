use std::cmp::Ordering;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SamplerError};
use crate::tensor::softmax;

/// Which proposals are kept each step; the rest are remasked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remasking {
    Random,
    #[default]
    LowConfidence,
    TopMargin,
}

/// A predicted clean token for one masked position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub position: usize,
    pub token: u32,
    /// Probability of `token` under the (temperature-scaled) softmax.
    pub confidence: f32,
    /// Gap between the two most probable tokens.
    pub margin: f32,
}

fn argmax(p: &[f32]) -> usize {
    // first index wins ties
    p.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Predict x0 for each `(position, logits)` row. Temperature 0 takes the
/// argmax; otherwise a token is drawn from `softmax(logits / temperature)`.
/// `exclude` (the mask id) is never proposed.
pub fn predict_x0<R: Rng + ?Sized>(
    rows: &[(usize, &[f32])],
    temperature: f32,
    exclude: Option<u32>,
    rng: &mut R,
) -> Result<Vec<Proposal>> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(SamplerError::NegativeTemperature(temperature));
    }
    rows.iter()
        .map(|&(position, logits)| {
            let mut scaled: Vec<f32> = if temperature > 0.0 {
                logits.iter().map(|l| l / temperature).collect()
            } else {
                logits.to_vec()
            };
            if let Some(slot) = exclude.and_then(|id| scaled.get_mut(id as usize)) {
                *slot = f32::NEG_INFINITY;
            }
            let probs = softmax(&scaled);
            let token = if temperature > 0.0 {
                WeightedIndex::new(&probs)
                    .map_err(|e| SamplerError::InvalidConfig(format!("cannot sample from logits: {e}")))?
                    .sample(rng)
            } else {
                argmax(&probs)
            };
            let mut top = [0.0f32; 2];
            for &p in &probs {
                if p > top[0] {
                    top = [p, top[0]];
                } else if p > top[1] {
                    top[1] = p;
                }
            }
            Ok(Proposal {
                position,
                token: token as u32,
                confidence: probs[token],
                margin: top[0] - top[1],
            })
        })
        .collect()
}

/// Pick `k` proposals to finalise. Returns ascending positions. Score ties go
/// to the lower position.
pub fn select_to_unmask<R: Rng + ?Sized>(
    proposals: &[Proposal],
    strategy: Remasking,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k > proposals.len() {
        return Err(SamplerError::TooManyToSelect {
            k,
            available: proposals.len(),
        });
    }
    let mut chosen: Vec<usize> = match strategy {
        Remasking::Random => {
            let mut candidates: Vec<usize> = proposals.iter().map(|p| p.position).collect();
            candidates.sort_unstable();
            index::sample(rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        }
        Remasking::LowConfidence | Remasking::TopMargin => {
            let score = |p: &Proposal| {
                if strategy == Remasking::LowConfidence {
                    p.confidence
                } else {
                    p.margin
                }
            };
            let mut ranked: Vec<&Proposal> = proposals.iter().collect();
            ranked.sort_by(|a, b| {
                score(b)
                    .partial_cmp(&score(a))
                    .unwrap_or(Ordering::Equal)
                    .then(a.position.cmp(&b.position))
            });
            ranked.iter().take(k).map(|p| p.position).collect()
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}
