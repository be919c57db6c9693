use rand::Rng;

use super::{NoiseSchedule, Result};

/// Forward (noising) process: every non-mask token independently becomes
/// `mask_token_id` with probability `1 − ᾱ(t)`; mask tokens stay masked.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &[u32],
    t: usize,
    schedule: &NoiseSchedule,
    mask_token_id: u32,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let p_mask = 1.0 - schedule.alpha_bar(t)?;
    Ok(x0
        .iter()
        .map(|&id| {
            if id == mask_token_id || rng.gen::<f64>() < p_mask {
                mask_token_id
            } else {
                id
            }
        })
        .collect())
}
