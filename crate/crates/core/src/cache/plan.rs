use std::collections::BTreeSet;
use std::ops::Range;

use super::{CacheConfig, CacheError, CacheVariant, Result, ShiftMode, WindowCenter};

/// Everything the planner needs to know about step `step`.
#[derive(Clone, Copy, Debug)]
pub struct PlanInput<'a> {
    pub step: usize,
    pub seq_len: usize,
    /// Prefill positions are `0..prompt_len`; generation follows.
    pub prompt_len: usize,
    /// Positions still masked at the start of this step.
    pub masked: &'a BTreeSet<usize>,
    /// Masked set at the start of the previous step; `None` before the first
    /// step, where it stands for every position.
    pub prev_masked: Option<&'a BTreeSet<usize>>,
    /// Positions this step will decode, when the order is fixed in advance.
    pub decoded_now: Option<&'a [usize]>,
    /// Positions decoded by the previous step.
    pub decoded_prev: &'a [usize],
    pub shifted_output: bool,
}

pub fn is_refresh_step(step: usize, interval: Option<usize>) -> bool {
    matches!(interval, Some(n) if n > 0 && step > 0 && step.is_multiple_of(n))
}

/// Union of `[c - ⌈w/2⌉, c + ⌊w/2⌋]` over the centres, clipped to `region`.
pub fn greedy_window(centers: &[usize], w: usize, region: Range<usize>) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for &c in centers {
        let lo = c.saturating_sub(w.div_ceil(2)).max(region.start);
        let hi = (c + w / 2).min(region.end.saturating_sub(1));
        if region.is_empty() || lo > hi {
            continue;
        }
        out.extend(lo..=hi);
    }
    out
}

/// Output row whose K/V is cached for token position `p`, or `None` when the
/// token contributes no row this step. `settled` reports whether a position's
/// input is final (decoded, with the one-step delay already applied).
pub fn shift_rows(mode: ShiftMode, p: usize, seq_len: usize, settled: impl Fn(usize) -> bool) -> Option<usize> {
    match mode {
        ShiftMode::UnShift => Some(p),
        ShiftMode::RightShift => (p + 1 < seq_len).then_some(p + 1),
        // Row p predicts token p+1: cache it only once its own input is fixed
        // and the token it predicts has been decoded as well.
        ShiftMode::UnAndRightShift => {
            (settled(p) && (p + 1 >= seq_len || settled(p + 1))).then_some(p)
        }
    }
}

/// Rows eligible for caching given the settled token positions.
pub fn cacheable_rows(mode: ShiftMode, settled: &BTreeSet<usize>, seq_len: usize) -> BTreeSet<usize> {
    settled
        .iter()
        .filter_map(|&p| shift_rows(mode, p, seq_len, |q| settled.contains(&q)))
        .collect()
}

fn complement(seq_len: usize, set: &BTreeSet<usize>) -> BTreeSet<usize> {
    (0..seq_len).filter(|p| !set.contains(p)).collect()
}

/// Compute set for one step (ascending) and whether it is a refresh step.
pub fn plan_compute_set(config: &CacheConfig, input: &PlanInput<'_>) -> Result<(Vec<usize>, bool)> {
    let s = input.seq_len;
    let all = || (0..s).collect::<Vec<_>>();
    if let Some(prev) = input.prev_masked {
        if let Some(&p) = input.masked.iter().find(|p| !prev.contains(p)) {
            return Err(CacheError::MaskedSetGrew(p));
        }
    }
    if config.variant.is_greedy() && input.decoded_now.is_none() {
        return Err(CacheError::MissingDecodeOrder);
    }
    let Some(prev_masked) = input.prev_masked else {
        return Ok((all(), false));
    };
    let refresh = is_refresh_step(input.step, config.variant.refresh_interval());
    let prefill: BTreeSet<usize> = (0..input.prompt_len.min(s)).collect();
    let settled = || complement(s, prev_masked);

    let (mut compute, logit_need): (BTreeSet<usize>, Vec<usize>) = match config.variant {
        CacheVariant::None => return Ok((all(), false)),
        CacheVariant::Decode { .. } if refresh => return Ok((all(), true)),
        CacheVariant::Greedy { .. } if refresh => return Ok((all(), true)),
        CacheVariant::Decode { .. } => (
            complement(s, &cacheable_rows(config.shift, &settled(), s)),
            input.masked.iter().copied().collect(),
        ),
        CacheVariant::Prefill => (
            complement(s, &cacheable_rows(config.shift, &prefill, s)),
            input.masked.iter().copied().collect(),
        ),
        CacheVariant::Pd { .. } => {
            let base = if refresh { prefill } else { settled() };
            (
                complement(s, &cacheable_rows(config.shift, &base, s)),
                input.masked.iter().copied().collect(),
            )
        }
        CacheVariant::Greedy {
            window_size,
            window_center,
            ..
        } => {
            let now = input.decoded_now.unwrap_or_default();
            let centers = match window_center {
                WindowCenter::PreviousD => input.decoded_prev,
                WindowCenter::CurrentD => now,
            };
            let mut c = greedy_window(centers, window_size, input.prompt_len..s);
            c.extend(now.iter().copied());
            c.extend(input.decoded_prev.iter().copied());
            (c, now.to_vec())
        }
    };
    for q in logit_need {
        let row = if input.shifted_output {
            q.checked_sub(1).ok_or_else(|| {
                CacheError::InvalidConfig("shifted-output model cannot predict position 0".into())
            })?
        } else {
            q
        };
        compute.insert(row);
    }
    Ok((compute.into_iter().collect(), refresh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheVariant;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn input<'a>(
        step: usize,
        masked: &'a BTreeSet<usize>,
        prev: Option<&'a BTreeSet<usize>>,
        now: Option<&'a [usize]>,
        prev_d: &'a [usize],
    ) -> PlanInput<'a> {
        PlanInput {
            step,
            seq_len: 16,
            prompt_len: 0,
            masked,
            prev_masked: prev,
            decoded_now: now,
            decoded_prev: prev_d,
            shifted_output: false,
        }
    }

    #[test]
    fn window_examples() {
        assert_eq!(greedy_window(&[5], 4, 0..16), set(&[3, 4, 5, 6, 7]));
        assert_eq!(greedy_window(&[0], 4, 0..16), set(&[0, 1, 2]));
        assert_eq!(greedy_window(&[5, 6], 2, 0..16), set(&[4, 5, 6, 7]));
        assert_eq!(greedy_window(&[5], 0, 0..16), set(&[5]));
        assert_eq!(greedy_window(&[15], 4, 8..16), set(&[13, 14, 15]));
        assert!(greedy_window(&[], 4, 0..16).is_empty());
    }

    #[test]
    fn decode_first_step_is_full() {
        let m = set(&(0..16).collect::<Vec<_>>());
        let cfg = CacheConfig::new(CacheVariant::Decode { refresh_interval: Some(8) });
        let (c, refresh) = plan_compute_set(&cfg, &input(0, &m, None, None, &[])).unwrap();
        assert_eq!(c, (0..16).collect::<Vec<_>>());
        assert!(!refresh);
    }

    #[test]
    fn decode_uses_previous_masked_set() {
        let prev = set(&[0, 1, 3, 6, 7, 9]);
        let m = set(&[0, 1, 6, 7]);
        let cfg = CacheConfig::new(CacheVariant::Decode { refresh_interval: None });
        let (c, refresh) = plan_compute_set(&cfg, &input(3, &m, Some(&prev), None, &[3, 9])).unwrap();
        assert_eq!(c, vec![0, 1, 3, 6, 7, 9]);
        assert!(!refresh);
    }

    #[test]
    fn decode_refreshes_every_n() {
        let prev = set(&[4, 5]);
        let m = set(&[5]);
        let cfg = CacheConfig::new(CacheVariant::Decode { refresh_interval: Some(8) });
        let (c, refresh) = plan_compute_set(&cfg, &input(8, &m, Some(&prev), None, &[4])).unwrap();
        assert_eq!(c.len(), 16);
        assert!(refresh);
        let (c, refresh) = plan_compute_set(&cfg, &input(9, &m, Some(&prev), None, &[4])).unwrap();
        assert_eq!(c, vec![4, 5]);
        assert!(!refresh);
    }

    #[test]
    fn greedy_example() {
        let prev = set(&[4, 9, 11]);
        let m = set(&[9, 11]);
        let cfg = CacheConfig::new(CacheVariant::Greedy {
            refresh_interval: None,
            window_size: 4,
            window_center: WindowCenter::PreviousD,
        });
        let now = [9usize];
        let (c, _) = plan_compute_set(&cfg, &input(5, &m, Some(&prev), Some(&now), &[4])).unwrap();
        assert_eq!(c, vec![2, 3, 4, 5, 6, 9]);
    }

    #[test]
    fn greedy_needs_order() {
        let m = set(&[1]);
        let cfg = CacheConfig::new(CacheVariant::Greedy {
            refresh_interval: Some(2),
            window_size: 4,
            window_center: WindowCenter::PreviousD,
        });
        assert!(matches!(
            plan_compute_set(&cfg, &input(1, &m, Some(&m), None, &[])),
            Err(CacheError::MissingDecodeOrder)
        ));
    }

    #[test]
    fn greedy_refresh_steps() {
        let cfg = CacheConfig::new(CacheVariant::Greedy {
            refresh_interval: Some(2),
            window_size: 4,
            window_center: WindowCenter::PreviousD,
        });
        let m = set(&[1]);
        let now = [1usize];
        let refreshes: Vec<usize> = (1..9)
            .filter(|&t| plan_compute_set(&cfg, &input(t, &m, Some(&m), Some(&now), &[])).unwrap().1)
            .collect();
        assert_eq!(refreshes, vec![2, 4, 6, 8]);
    }

    #[test]
    fn refresh_predicate() {
        assert!(!is_refresh_step(0, Some(1)));
        assert!((1..10).all(|t| is_refresh_step(t, Some(1))));
        assert!(!(0..1000).any(|t| is_refresh_step(t, None)));
    }

    #[test]
    fn masked_set_may_not_grow() {
        let prev = set(&[1]);
        let m = set(&[1, 2]);
        let cfg = CacheConfig::new(CacheVariant::Decode { refresh_interval: None });
        assert!(matches!(
            plan_compute_set(&cfg, &input(1, &m, Some(&prev), None, &[])),
            Err(CacheError::MaskedSetGrew(2))
        ));
    }

    #[test]
    fn prefill_and_pd() {
        let prev = set(&[4, 5, 6, 7]);
        let m = set(&[5, 6, 7]);
        let mut inp = input(4, &m, Some(&prev), None, &[4]);
        inp.seq_len = 8;
        inp.prompt_len = 3;
        let prefill = CacheConfig::new(CacheVariant::Prefill);
        assert_eq!(plan_compute_set(&prefill, &inp).unwrap(), (vec![3, 4, 5, 6, 7], false));
        let pd = CacheConfig::new(CacheVariant::Pd { refresh_interval: Some(4) });
        assert_eq!(plan_compute_set(&pd, &inp).unwrap(), (vec![3, 4, 5, 6, 7], true));
        inp.step = 5;
        assert_eq!(plan_compute_set(&pd, &inp).unwrap(), (vec![4, 5, 6, 7], false));
    }

    #[test]
    fn shift_row_sources() {
        let none = |_: usize| false;
        assert_eq!(shift_rows(ShiftMode::UnShift, 7, 16, none), Some(7));
        assert_eq!(shift_rows(ShiftMode::RightShift, 7, 16, none), Some(8));
        assert_eq!(shift_rows(ShiftMode::RightShift, 15, 16, none), None);
        assert_eq!(shift_rows(ShiftMode::UnAndRightShift, 7, 16, |q| q == 7), None);
        assert_eq!(shift_rows(ShiftMode::UnAndRightShift, 7, 16, |q| q == 7 || q == 8), Some(7));
        assert_eq!(shift_rows(ShiftMode::UnAndRightShift, 15, 16, |q| q == 15), Some(15));
    }

    #[test]
    fn shifted_model_recomputes_logit_rows() {
        let prev = set(&[4, 5, 6]);
        let m = set(&[5, 6]);
        let mut inp = input(2, &m, Some(&prev), None, &[4]);
        inp.seq_len = 8;
        inp.prompt_len = 4;
        inp.shifted_output = true;
        let cfg = CacheConfig::new(CacheVariant::Decode { refresh_interval: None });
        // rows 0..3 and 7 are cacheable; masked 5 and 6 need rows 4 and 5.
        assert_eq!(plan_compute_set(&cfg, &inp).unwrap().0, vec![4, 5, 6]);
        let rs = CacheConfig {
            shift: ShiftMode::RightShift,
            ..cfg
        };
        // settled {0,1,2,3,7} -> rows {1,2,3,4}; row 4 is needed for logits.
        assert_eq!(plan_compute_set(&rs, &inp).unwrap().0, vec![0, 4, 5, 6, 7]);
    }
}
