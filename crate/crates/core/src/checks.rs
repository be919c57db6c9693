//! End-to-end checks shared by the acceptance test target and `dkv selftest`.
//!
//! Each check runs at a [`Scale`] and returns an [`Outcome`]. Generation runs
//! go through an [`Audit`], which asserts the sampler invariants after every
//! step; [`Audit::outcome`] reports them as one more check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{compute_counters, kv_dynamics, Dynamics};
use crate::cache::{
    build_layout, concat_reorder, CacheConfig, CacheVariant, ExecPath, Fault, WindowCenter,
};
use crate::model::{forward_partial, KvSlab, ModelConfig, ModelWeights};
use crate::par;
use crate::sampler::{
    corrupt, GenerateOptions, GenerationOutput, Generator, NoiseSchedule, Remasking, SamplerConfig,
};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Informational check that missed its target; does not fail a run.
    Warn,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Outcome {
    fn new(name: &'static str, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn soft(name: &'static str, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: if ok { Status::Pass } else { Status::Warn },
            detail: detail.into(),
        }
    }

    fn error(name: &'static str, e: impl fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }

    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Warn => "WARN",
        };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

type CheckResult<T> = Result<T, String>;

fn err(e: impl fmt::Display) -> String {
    e.to_string()
}

/// Problem sizes for every check.
#[derive(Clone, Debug)]
pub struct Scale {
    pub model: ModelConfig,
    /// Fail the timed checks that exceed their runtime budget.
    pub enforce_budgets: bool,
    pub equivalence_seeds: usize,
    pub equivalence_prompt: usize,
    pub equivalence_len: usize,
    pub equivalence_block: usize,
    pub reorder_cases: usize,
    pub reorder_max_len: usize,
    pub permutation_cases: usize,
    pub permutation_len: usize,
    pub delay_seeds: usize,
    pub delay_len: usize,
    pub greedy_lens: Vec<usize>,
    pub reduction_prompt: usize,
    pub reduction_len: usize,
    pub wallclock_len: usize,
    pub wallclock_steps: usize,
    pub corruption_trials: usize,
    pub dynamics_seeds: usize,
    pub dynamics_len: usize,
    pub prefill_prompt: usize,
    pub prefill_len: usize,
}

impl Scale {
    /// The sizes the acceptance suite is specified at.
    pub fn full() -> Self {
        Self {
            model: ModelConfig::toy(),
            enforce_budgets: true,
            equivalence_seeds: 50,
            equivalence_prompt: 16,
            equivalence_len: 64,
            equivalence_block: 32,
            reorder_cases: 100,
            reorder_max_len: 64,
            permutation_cases: 50,
            permutation_len: 48,
            delay_seeds: 10,
            delay_len: 32,
            greedy_lens: vec![64, 128, 256],
            reduction_prompt: 64,
            reduction_len: 256,
            wallclock_len: 512,
            wallclock_steps: 64,
            corruption_trials: 10_000,
            dynamics_seeds: 3,
            dynamics_len: 32,
            prefill_prompt: 128,
            prefill_len: 32,
        }
    }

    /// Reduced sizes for the built-in self-test.
    pub fn quick() -> Self {
        Self {
            model: ModelConfig::toy(),
            enforce_budgets: false,
            equivalence_seeds: 8,
            equivalence_prompt: 16,
            equivalence_len: 32,
            equivalence_block: 16,
            reorder_cases: 50,
            reorder_max_len: 64,
            permutation_cases: 20,
            permutation_len: 48,
            delay_seeds: 3,
            delay_len: 32,
            greedy_lens: vec![64, 128, 256],
            reduction_prompt: 16,
            reduction_len: 64,
            wallclock_len: 128,
            wallclock_steps: 32,
            corruption_trials: 10_000,
            dynamics_seeds: 1,
            dynamics_len: 16,
            prefill_prompt: 32,
            prefill_len: 16,
        }
    }
}

/// Prompt of `len` non-mask tokens.
pub fn random_prompt(config: &ModelConfig, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f9e_0d00);
    (0..len)
        .map(|_| loop {
            let id = rng.gen_range(0..config.vocab_size as u32);
            if id != config.mask_token_id {
                break id;
            }
        })
        .collect()
}

/// Steps generations while checking sampler invariants after every step.
#[derive(Debug, Default)]
pub struct Audit {
    runs: usize,
    steps: usize,
    violations: Vec<String>,
}

impl Audit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    fn flag(&mut self, msg: String) {
        if self.violations.len() < 20 {
            self.violations.push(msg);
        }
    }

    /// Run `g` to completion, calling `inspect` after each step.
    pub fn run_with(
        &mut self,
        mut g: Generator<'_>,
        mut inspect: impl FnMut(&Generator<'_>) -> CheckResult<()>,
    ) -> CheckResult<GenerationOutput> {
        self.runs += 1;
        let run = self.runs;
        let mask = g.weights().config().mask_token_id;
        let prompt: Vec<u32> = g.state().tokens[..g.state().prompt_len].to_vec();
        let seq_len = g.state().tokens.len();
        let gen_len = seq_len - prompt.len();
        let mut total_decoded = 0;
        while !g.is_finished() {
            let before = g.state().tokens.clone();
            let masked_before = g.state().masked.clone();
            let t = g.state().step;
            let alloc = g.schedule().steps[t];
            let block = g.schedule().blocks[alloc.block].clone();
            let span = prompt.len() + block.start..prompt.len() + block.end;
            g.step().map_err(err)?;
            self.steps += 1;
            let s = g.state();
            let decoded = &s.decoded_this_step;
            total_decoded += decoded.len();
            if decoded.len() != alloc.tokens {
                self.flag(format!("run {run} step {t}: decoded {} tokens, schedule says {}", decoded.len(), alloc.tokens));
            }
            if s.masked.len() + decoded.len() != masked_before.len() || s.masked.iter().any(|p| !masked_before.contains(p)) {
                self.flag(format!("run {run} step {t}: masked set did not shrink by exactly D_t"));
            }
            for &p in decoded {
                if !span.contains(&p) {
                    self.flag(format!("run {run} step {t}: decoded {p} outside block {span:?}"));
                }
                if !masked_before.contains(&p) {
                    self.flag(format!("run {run} step {t}: decoded {p} was not masked"));
                }
                if s.tokens[p] == mask {
                    self.flag(format!("run {run} step {t}: decoded {p} still holds the mask id"));
                }
            }
            for (p, (&a, &b)) in before.iter().zip(&s.tokens).enumerate() {
                if !masked_before.contains(&p) && a != b {
                    self.flag(format!("run {run} step {t}: finalized position {p} changed {a} -> {b}"));
                }
                if s.masked.contains(&p) && b != mask {
                    self.flag(format!("run {run} step {t}: masked position {p} holds {b}"));
                }
            }
            inspect(&g)?;
        }
        let out = g.finish();
        if total_decoded != gen_len {
            self.flag(format!("run {run}: decoded {total_decoded} of {gen_len} positions"));
        }
        if out.generated().contains(&mask) {
            self.flag(format!("run {run}: mask tokens remain after the last step"));
        }
        if out.sequence[..prompt.len()] != prompt[..] {
            self.flag(format!("run {run}: prompt was modified"));
        }
        Ok(out)
    }

    pub fn run(
        &mut self,
        weights: &ModelWeights,
        config: SamplerConfig,
        prompt: &[u32],
        options: GenerateOptions,
    ) -> CheckResult<GenerationOutput> {
        let g = Generator::new(weights, config, prompt, options).map_err(err)?;
        self.run_with(g, |_| Ok(()))
    }

    pub fn outcome(&self) -> Outcome {
        let ok = self.violations.is_empty() && self.runs > 0;
        let detail = if self.violations.is_empty() {
            format!("{} runs, {} steps, no violations", self.runs, self.steps)
        } else {
            format!("{} violations, first: {}", self.violations.len(), self.violations[0])
        };
        Outcome::new("sampler invariants", ok, detail)
    }
}

fn decode(n: Option<usize>) -> CacheConfig {
    CacheConfig::new(CacheVariant::Decode { refresh_interval: n })
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Decode with a refresh every step must reproduce the uncached sampler
/// token for token.
pub fn refresh_degeneracy(scale: &Scale, weights: &ModelWeights, audit: &mut Audit) -> Outcome {
    const NAME: &str = "oracle equivalence (decode N=1 vs none)";
    let run = |audit: &mut Audit| -> CheckResult<(usize, usize)> {
        let mut mismatches = 0;
        for seed in 0..scale.equivalence_seeds as u64 {
            let prompt = random_prompt(&scale.model, scale.equivalence_prompt, seed);
            let mut cfg = SamplerConfig::new(scale.equivalence_len, scale.equivalence_len, scale.equivalence_block);
            cfg.sample_seed = seed;
            let base = audit.run(weights, cfg, &prompt, GenerateOptions::default())?;
            cfg.cache = decode(Some(1));
            let cached = audit.run(weights, cfg, &prompt, GenerateOptions::default())?;
            let same_steps = base
                .trace
                .records
                .iter()
                .zip(&cached.trace.records)
                .all(|(a, b)| a.decoded == b.decoded);
            if base.sequence != cached.sequence || !same_steps {
                mismatches += 1;
            }
        }
        Ok((mismatches, scale.equivalence_seeds))
    };
    let started = Instant::now();
    match run(audit) {
        Ok((bad, n)) => {
            let secs = started.elapsed().as_secs_f64();
            Outcome::new(
                NAME,
                bad == 0 && within_budget(scale, secs, 120.0),
                format!("{}/{n} seeds identical ({secs:.1}s, budget 120s)", n - bad),
            )
        }
        Err(e) => Outcome::error(NAME, e),
    }
}

fn within_budget(scale: &Scale, secs: f64, budget: f64) -> bool {
    !scale.enforce_budgets || secs <= budget
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize) -> BTreeSet<usize> {
    (0..n).filter(|_| rng.gen_bool(0.5)).collect()
}

/// Natural-order K/V of one layer built from cached and fresh slabs.
fn scatter_natural(seq_len: usize, width: usize, slabs: &[&KvSlab]) -> (Matrix, Matrix) {
    let mut k = Matrix::zeros(seq_len, width);
    let mut v = Matrix::zeros(seq_len, width);
    for slab in slabs {
        for (r, &p) in slab.row_positions.iter().enumerate() {
            k.row_mut(p).copy_from_slice(slab.keys.row(r));
            v.row_mut(p).copy_from_slice(slab.values.row(r));
        }
    }
    (k, v)
}

/// One random case of the concat-reorder oracle: returns (K/V rows exact,
/// max logit difference between layout-order and natural-order caches).
fn reorder_case(weights: &ModelWeights, rng: &mut ChaCha8Rng, max_len: usize) -> CheckResult<(bool, f32)> {
    let cfg = weights.config();
    let s = rng.gen_range(2..=max_len);
    let tokens: Vec<u32> = (0..s).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let all: Vec<usize> = (0..s).collect();
    let full = forward_partial(weights, &tokens, &all, &[]).map_err(err)?;

    let mut cached_order: Vec<usize> = random_subset(rng, s).into_iter().collect();
    cached_order.shuffle(rng);
    let held: BTreeSet<usize> = cached_order.iter().copied().collect();
    let compute: Vec<usize> = all.iter().copied().filter(|p| !held.contains(p)).collect();
    let cache: Vec<KvSlab> = full.fresh_kv.iter().map(|slab| slab.gather(&cached_order)).collect();
    let step = forward_partial(weights, &tokens, &compute, &cache).map_err(err)?;

    let next_cached = random_subset(rng, s);
    let layout = build_layout(&compute, &cached_order, &next_cached).map_err(err)?;
    let mut exact = true;
    let mut layout_slabs = Vec::with_capacity(cfg.n_layers);
    let mut natural_slabs = Vec::with_capacity(cfg.n_layers);
    let next_natural: Vec<usize> = next_cached.iter().copied().collect();
    for (cached, fresh) in cache.iter().zip(&step.fresh_kv) {
        let (k, v) = scatter_natural(s, cfg.d_model, &[cached, fresh]);
        let (used, next) = concat_reorder(cached.clone(), fresh, &layout.reorder_index).map_err(err)?;
        // attention saw the same rows the natural buffers hold
        exact &= used.row_positions == layout.layout
            && bits_equal(used.keys.as_slice(), k.gather_rows(&layout.layout).as_slice())
            && bits_equal(used.values.as_slice(), v.gather_rows(&layout.layout).as_slice());
        let got: BTreeSet<usize> = next.row_positions.iter().copied().collect();
        exact &= got == next_cached
            && bits_equal(next.keys.as_slice(), k.gather_rows(&next.row_positions).as_slice())
            && bits_equal(next.values.as_slice(), v.gather_rows(&next.row_positions).as_slice());
        natural_slabs.push(KvSlab {
            layer: next.layer,
            keys: k.gather_rows(&next_natural),
            values: v.gather_rows(&next_natural),
            row_positions: next_natural.clone(),
        });
        layout_slabs.push(next);
    }
    let rest: Vec<usize> = all.iter().copied().filter(|p| !next_cached.contains(p)).collect();
    let a = forward_partial(weights, &tokens, &rest, &layout_slabs).map_err(err)?;
    let b = forward_partial(weights, &tokens, &rest, &natural_slabs).map_err(err)?;
    Ok((exact, a.logits.max_abs_diff(&b.logits)))
}

pub fn concat_reorder_oracle(scale: &Scale, weights: &ModelWeights) -> Outcome {
    const NAME: &str = "concat_reorder oracle";
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ca7);
    let mut inexact = 0;
    let mut worst = 0.0f32;
    for _ in 0..scale.reorder_cases {
        match reorder_case(weights, &mut rng, scale.reorder_max_len) {
            Ok((exact, diff)) => {
                inexact += usize::from(!exact);
                worst = worst.max(diff);
            }
            Err(e) => return Outcome::error(NAME, e),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        NAME,
        inexact == 0 && worst <= 1e-5 && within_budget(scale, secs, 60.0),
        format!(
            "{} cases, {inexact} with K/V mismatches, max logit diff {worst:.2e} (tol 1e-5), {secs:.1}s (budget 60s)",
            scale.reorder_cases
        ),
    )
}

/// Per-position logits do not depend on the order rows are stored in.
pub fn permutation_invariance(scale: &Scale, weights: &ModelWeights) -> Outcome {
    const NAME: &str = "layout-permutation invariance";
    let cfg = weights.config();
    let s = scale.permutation_len;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e7);
    let run = |rng: &mut ChaCha8Rng| -> CheckResult<f32> {
        let tokens: Vec<u32> = (0..s).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        let natural: Vec<usize> = (0..s).collect();
        let reference = forward_partial(weights, &tokens, &natural, &[]).map_err(err)?;
        let mut perm = natural.clone();
        perm.shuffle(rng);
        let split = rng.gen_range(0..s);
        let (held, compute) = perm.split_at(split);
        let cache: Vec<KvSlab> = reference.fresh_kv.iter().map(|slab| slab.gather(held)).collect();
        let out = forward_partial(weights, &tokens, compute, &cache).map_err(err)?;
        let mut worst = 0.0f32;
        for (r, &p) in compute.iter().enumerate() {
            for (a, b) in out.logits.row(r).iter().zip(reference.logits.row(p)) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    };
    let mut worst = 0.0f32;
    for _ in 0..scale.permutation_cases {
        match run(&mut rng) {
            Ok(d) => worst = worst.max(d),
            Err(e) => return Outcome::error(NAME, e),
        }
    }
    Outcome::new(
        NAME,
        worst <= 1e-5,
        format!("{} permutations, max logit diff {worst:.2e} (tol 1e-5)", scale.permutation_cases),
    )
}

/// Cached rows of a decoded position equal the rows computed on the step
/// after its decode, for as long as it stays cached.
pub fn delay_correctness(scale: &Scale, weights: &ModelWeights, audit: &mut Audit) -> Outcome {
    const NAME: &str = "delay correctness";
    let mut checked = 0usize;
    let mut run_seed = |seed: u64, audit: &mut Audit| -> CheckResult<()> {
        let prompt = random_prompt(&scale.model, 16, seed);
        let mut cfg = SamplerConfig::new(scale.delay_len, scale.delay_len, scale.delay_len);
        cfg.sample_seed = seed;
        cfg.cache = decode(None);
        let options = GenerateOptions {
            keep_forward: true,
            ..GenerateOptions::default()
        };
        let g = Generator::new(weights, cfg, &prompt, options).map_err(err)?;
        // position -> per-layer (keys, values) from the step after decode
        let mut expected: BTreeMap<usize, Vec<RowKv>> = BTreeMap::new();
        let mut prev_decoded: Vec<usize> = Vec::new();
        audit.run_with(g, |g| {
            let plan = g.last_plan().ok_or("no plan recorded")?;
            let fresh = g.last_fresh_kv().ok_or("no fresh rows recorded")?;
            let step = plan.step;
            for &p in &prev_decoded {
                let r = plan
                    .compute_set
                    .iter()
                    .position(|&q| q == p)
                    .ok_or_else(|| format!("step {step}: position {p} decoded last step was not recomputed"))?;
                let rows = fresh.iter().map(|s| (s.keys.row(r).to_vec(), s.values.row(r).to_vec())).collect();
                expected.insert(p, rows);
            }
            prev_decoded = g.state().decoded_this_step.clone();
            if g.is_finished() {
                return Ok(());
            }
            let slabs = g.engine().cached_slabs();
            let held = &slabs[0].row_positions;
            for &p in &prev_decoded {
                if held.contains(&p) {
                    return Err(format!("step {step}: position {p} cached on the step it was decoded"));
                }
            }
            for (&p, rows) in &expected {
                let r = held
                    .iter()
                    .position(|&q| q == p)
                    .ok_or_else(|| format!("after step {step}: settled position {p} missing from cache"))?;
                for (slab, (k, v)) in slabs.iter().zip(rows) {
                    if !bits_equal(slab.keys.row(r), k) || !bits_equal(slab.values.row(r), v) {
                        return Err(format!("after step {step}: cached row of {p} differs at layer {}", slab.layer));
                    }
                }
                checked += 1;
            }
            Ok(())
        })?;
        Ok(())
    };
    for seed in 0..scale.delay_seeds as u64 {
        if let Err(e) = run_seed(seed, audit) {
            return Outcome::new(NAME, false, format!("seed {seed}: {e}"));
        }
    }
    Outcome::new(
        NAME,
        checked > 0,
        format!("{} seeds, {checked} cached-row comparisons byte-equal", scale.delay_seeds),
    )
}

/// Greedy caching keeps per-step work bounded and total work linear in L.
pub fn greedy_boundedness(scale: &Scale, weights: &ModelWeights, audit: &mut Audit) -> Outcome {
    const NAME: &str = "greedy boundedness";
    const PROMPT: usize = 8;
    let mut ratios = Vec::new();
    let mut worst_step = 0;
    for &l in &scale.greedy_lens {
        let mut cfg = SamplerConfig::new(l, l, l);
        cfg.remasking = Remasking::Random;
        cfg.cache = CacheConfig::new(CacheVariant::Greedy {
            refresh_interval: None,
            window_size: 4,
            window_center: WindowCenter::PreviousD,
        });
        let prompt = random_prompt(&scale.model, PROMPT, l as u64);
        let out = match audit.run(weights, cfg, &prompt, GenerateOptions::default()) {
            Ok(out) => out,
            Err(e) => return Outcome::error(NAME, e),
        };
        // the first step fills the cache and necessarily computes everything
        worst_step = out.trace.records[1..].iter().map(|r| r.compute_rows).max().unwrap_or(0).max(worst_step);
        let total: usize = out.trace.records.iter().map(|r| r.compute_rows).sum();
        ratios.push(total as f64 / l as f64);
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    let spread = hi / lo - 1.0;
    Outcome::new(
        NAME,
        worst_step <= 7 && spread <= 0.05,
        format!(
            "max rows per step after the first {worst_step} (limit 7); total/L {:?} spread {:.1}% (limit 5%)",
            ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(),
            spread * 100.0
        ),
    )
}

/// Query rows of Decode with one token per step: a full first step and full
/// refresh steps, otherwise every position not settled before the previous
/// step.
type RowKv = (Vec<f32>, Vec<f32>);

pub fn decode_rows_closed_form(prompt: usize, gen_len: usize, refresh: Option<usize>) -> u64 {
    let s = (prompt + gen_len) as u64;
    let mut total = s;
    for t in 1..gen_len {
        let refreshing = matches!(refresh, Some(n) if t % n == 0);
        total += if refreshing { s } else { (gen_len - t + 1) as u64 };
    }
    total
}

pub fn compute_reduction(scale: &Scale, weights: &ModelWeights, audit: &mut Audit) -> Outcome {
    const NAME: &str = "compute reduction";
    let (p, l) = (scale.reduction_prompt, scale.reduction_len);
    let prompt = random_prompt(&scale.model, p, 11);
    let mut cfg = SamplerConfig::new(l, l, l);
    let run = |cfg: SamplerConfig, audit: &mut Audit| {
        audit
            .run(weights, cfg, &prompt, GenerateOptions::default())
            .map(|o| compute_counters(&o.trace, &scale.model).total_query_rows)
    };
    let none = match run(cfg, audit) {
        Ok(r) => r,
        Err(e) => return Outcome::error(NAME, e),
    };
    cfg.cache = decode(Some(8));
    let cached = match run(cfg, audit) {
        Ok(r) => r,
        Err(e) => return Outcome::error(NAME, e),
    };
    let expected_none = (l * (p + l)) as u64;
    let expected = decode_rows_closed_form(p, l, Some(8));
    let reduction = 1.0 - cached as f64 / none as f64;
    Outcome::new(
        NAME,
        none == expected_none && cached == expected && reduction >= 0.40,
        format!(
            "none {none} rows (closed form {expected_none}), decode:8 {cached} rows (closed form {expected}), reduction {:.1}% (need >= 40%)",
            reduction * 100.0
        ),
    )
}

/// Single-thread throughput of Decode(N=8) against None. Informational.
pub fn wall_clock(scale: &Scale, weights: &ModelWeights) -> Outcome {
    const NAME: &str = "wall-clock speedup";
    let l = scale.wallclock_len;
    let prompt = random_prompt(&scale.model, 16, 3);
    let time = |cache: CacheConfig| -> CheckResult<f64> {
        let mut cfg = SamplerConfig::new(l, scale.wallclock_steps, l);
        cfg.cache = cache;
        par::with_threads(1, || {
            let g = Generator::new(weights, cfg, &prompt, GenerateOptions::default()).map_err(err)?;
            let started = Instant::now();
            let mut g = g;
            g.run().map_err(err)?;
            Ok(l as f64 / started.elapsed().as_secs_f64())
        })
    };
    match (time(CacheConfig::default()), time(decode(Some(8)))) {
        (Ok(base), Ok(fast)) => Outcome::soft(
            NAME,
            fast >= 1.3 * base,
            format!(
                "L={l} T={}: none {base:.1} tok/s, decode:8 {fast:.1} tok/s, {:.2}x (target 1.3x, informational)",
                scale.wallclock_steps,
                fast / base
            ),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::error(NAME, e),
    }
}

pub fn corruption_marginal(scale: &Scale) -> Outcome {
    const NAME: &str = "corruption marginal";
    const LEN: usize = 100;
    const T: usize = 128;
    let schedule = match NoiseSchedule::new(T) {
        Ok(s) => s,
        Err(e) => return Outcome::error(NAME, e),
    };
    let x0: Vec<u32> = (0..LEN as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let mut parts = Vec::new();
    let mut ok = true;
    for t in [T / 4, T / 2, 3 * T / 4] {
        let p = 1.0 - schedule.alpha_bar(t).unwrap_or(f64::NAN);
        let mut masked = 0usize;
        for _ in 0..scale.corruption_trials {
            match corrupt(&x0, t, &schedule, u32::MAX, &mut rng) {
                Ok(x) => masked += x.iter().filter(|&&id| id == u32::MAX).count(),
                Err(e) => return Outcome::error(NAME, e),
            }
        }
        let n = (LEN * scale.corruption_trials) as f64;
        let rate = masked as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        ok &= (rate - p).abs() <= 3.0 * sigma;
        parts.push(format!("t/T={:.2} rate {rate:.4} vs {p:.4} ({:.1} sigma)", t as f64 / T as f64, (rate - p).abs() / sigma));
    }
    Outcome::new(NAME, ok, parts.join("; "))
}

fn matrix_csv_ok(matrix: &[Vec<f64>]) -> CheckResult<()> {
    let mut buf = Vec::new();
    Dynamics::write_matrix_csv(matrix, &mut buf).map_err(err)?;
    let text = String::from_utf8(buf).map_err(err)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|line| line.split(',').skip(1).map(|v| v.parse::<f64>().map_err(err)).collect())
        .collect::<CheckResult<_>>()?;
    let n = rows.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(format!("row {i} has {} columns, expected {n}", row.len()));
        }
        if row[i] != 0.0 {
            return Err(format!("diagonal entry {i} is {}", row[i]));
        }
        if let Some(j) = (0..n).find(|&j| row[j].to_bits() != rows[j][i].to_bits()) {
            return Err(format!("entry ({i},{j}) differs from ({j},{i})"));
        }
    }
    Ok(())
}

/// K/V dynamics on uncached runs: well-formed matrices (hard) and the
/// reveal-step spike (soft).
pub fn dynamics_reproduction(scale: &Scale, weights: &ModelWeights, audit: &mut Audit) -> Outcome {
    const NAME: &str = "kv dynamics";
    let mut spikes = 0.0;
    let mut tokens = 0usize;
    for seed in 0..scale.dynamics_seeds as u64 {
        let mut cfg = SamplerConfig::new(scale.dynamics_len, scale.dynamics_len, scale.dynamics_len);
        cfg.sample_seed = seed;
        cfg.snapshot_layer = Some(scale.model.n_layers / 2);
        let prompt = random_prompt(&scale.model, 16, 100 + seed);
        let out = match audit.run(weights, cfg, &prompt, GenerateOptions::default()) {
            Ok(o) => o,
            Err(e) => return Outcome::error(NAME, e),
        };
        let d = match kv_dynamics(&out.trace) {
            Ok(d) => d,
            Err(e) => return Outcome::error(NAME, e),
        };
        for m in [&d.key_euclidean, &d.key_cosine, &d.value_euclidean, &d.value_cosine] {
            if let Err(e) = matrix_csv_ok(m) {
                return Outcome::new(NAME, false, format!("malformed matrix: {e}"));
            }
        }
        let eligible = d.key_tokens.iter().filter(|t| t.reveal_change.is_some()).count();
        if let Some(f) = Dynamics::reveal_spike_fraction(&d.key_tokens) {
            spikes += f * eligible as f64;
            tokens += eligible;
        }
    }
    let fraction = if tokens == 0 { 0.0 } else { spikes / tokens as f64 };
    Outcome::soft(
        NAME,
        fraction >= 0.8,
        format!(
            "matrices symmetric with zero diagonal; K change at reveal step above median for {:.1}% of {tokens} tokens (target 80%)",
            fraction * 100.0
        ),
    )
}

/// Prefill rows written on the first step stay byte-identical to the end.
pub fn prefill_immutability(scale: &Scale, weights: &ModelWeights, audit: &mut Audit) -> Outcome {
    const NAME: &str = "prefill immutability";
    let prompt = random_prompt(&scale.model, scale.prefill_prompt, 21);
    let p = prompt.len();
    let mut compared = 0usize;
    for variant in [CacheVariant::Prefill, CacheVariant::Pd { refresh_interval: Some(4) }] {
        let mut cfg = SamplerConfig::new(scale.prefill_len, scale.prefill_len, scale.prefill_len);
        cfg.cache = CacheConfig::new(variant);
        let g = match Generator::new(weights, cfg, &prompt, GenerateOptions::default()) {
            Ok(g) => g,
            Err(e) => return Outcome::error(NAME, e),
        };
        let mut first: Option<Vec<(Matrix, Matrix)>> = None;
        let res = audit.run_with(g, |g| {
            if let Some(plan) = g.last_plan() {
                if plan.step > 0 && plan.compute_set.iter().any(|&q| q < p) {
                    return Err(format!("{variant}: step {} recomputed a prefill row", plan.step));
                }
            }
            if g.is_finished() {
                return Ok(());
            }
            let slabs = g.engine().cached_slabs();
            let rows: Vec<(Matrix, Matrix)> = slabs
                .iter()
                .map(|s| {
                    let idx: Vec<usize> = (0..p)
                        .map(|q| s.row_positions.iter().position(|&x| x == q).ok_or(q))
                        .collect::<Result<_, _>>()
                        .map_err(|q| format!("{variant}: prefill position {q} not cached"))?;
                    Ok((s.keys.gather_rows(&idx), s.values.gather_rows(&idx)))
                })
                .collect::<CheckResult<_>>()?;
            match &first {
                None => first = Some(rows),
                Some(f) => {
                    let same = f
                        .iter()
                        .zip(&rows)
                        .all(|(a, b)| bits_equal(a.0.as_slice(), b.0.as_slice()) && bits_equal(a.1.as_slice(), b.1.as_slice()));
                    if !same {
                        return Err(format!("{variant}: prefill rows changed after step {}", g.state().step - 1));
                    }
                    compared += 1;
                }
            }
            Ok(())
        });
        if let Err(e) = res {
            return Outcome::new(NAME, false, e);
        }
    }
    Outcome::new(
        NAME,
        compared > 0,
        format!("prompt {p}, prefill and pd:4, {compared} step snapshots byte-identical to step 0"),
    )
}

/// Every variant keeps `cached ∪ compute` a permutation of all positions,
/// and the engine rejects a corrupted reorder index.
pub fn layout_soundness(scale: &Scale, weights: &ModelWeights, fault: Option<Fault>) -> Outcome {
    const NAME: &str = "layout soundness";
    let greedy = CacheVariant::Greedy {
        refresh_interval: Some(8),
        window_size: 4,
        window_center: WindowCenter::PreviousD,
    };
    let variants = [
        CacheVariant::None,
        CacheVariant::Decode { refresh_interval: Some(4) },
        CacheVariant::Decode { refresh_interval: None },
        CacheVariant::Prefill,
        CacheVariant::Pd { refresh_interval: Some(4) },
        greedy,
    ];
    let prompt = random_prompt(&scale.model, 8, 5);
    let l = scale.equivalence_len;
    let mut steps = 0;
    for variant in variants {
        for path in [ExecPath::Reorder, ExecPath::Naive] {
            let mut cfg = SamplerConfig::new(l, l / 2, l / 2);
            cfg.remasking = Remasking::Random;
            cfg.cache = CacheConfig {
                variant,
                path,
                ..CacheConfig::default()
            };
            let options = GenerateOptions {
                record_layout: true,
                fault,
                ..GenerateOptions::default()
            };
            let out = match crate::sampler::generate(weights, cfg, &prompt, options) {
                Ok(o) => o,
                Err(f) => {
                    return Outcome::new(
                        NAME,
                        false,
                        format!("{variant} ({path:?}) failed after {} steps: {}", f.trace.steps(), f.error),
                    )
                }
            };
            let s = prompt.len() + l;
            for rec in &out.layout {
                let mut seen = vec![false; s];
                for &q in rec.cached_positions.iter().chain(&rec.compute_set) {
                    if q >= s || std::mem::replace(&mut seen[q], true) {
                        return Outcome::new(NAME, false, format!("{variant} step {}: position {q} repeated or out of range", rec.step));
                    }
                }
                if seen.iter().any(|&x| !x) {
                    return Outcome::new(NAME, false, format!("{variant} step {}: positions missing", rec.step));
                }
                steps += 1;
            }
        }
    }
    Outcome::new(NAME, true, format!("{} variants x 2 paths, {steps} step layouts are permutations", variants.len()))
}

/// Shared model for the checks at a given scale.
pub fn weights(scale: &Scale) -> CheckResult<ModelWeights> {
    ModelWeights::init(&scale.model).map_err(err)
}

/// The self-test: the deterministic checks at reduced size.
pub fn selftest(fault: Option<Fault>) -> Vec<Outcome> {
    let scale = Scale::quick();
    let w = match weights(&scale) {
        Ok(w) => w,
        Err(e) => return vec![Outcome::error("model init", e)],
    };
    let mut audit = Audit::new();
    let mut out = vec![
        layout_soundness(&scale, &w, fault),
        refresh_degeneracy(&scale, &w, &mut audit),
        concat_reorder_oracle(&scale, &w),
        permutation_invariance(&scale, &w),
        delay_correctness(&scale, &w, &mut audit),
        greedy_boundedness(&scale, &w, &mut audit),
        compute_reduction(&scale, &w, &mut audit),
        corruption_marginal(&scale),
        prefill_immutability(&scale, &w, &mut audit),
    ];
    out.push(audit.outcome());
    out
}
