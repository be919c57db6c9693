use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use dkv_core::analysis::{kv_dynamics, throughput, AnalysisError, Dynamics, RunReport, StepTrace};
use dkv_core::cache::{CacheConfig, CacheVariant, Fault};
use dkv_core::checks;
use dkv_core::model::ModelWeights;
use dkv_core::sampler::{generate as run_generation, GenerateOptions, GenerationOutput, Generator};

use crate::config::RunConfig;
use crate::{exit, Failure};

/// Size the global rayon pool from `DKV_THREADS`. Deterministic runs are
/// pinned to one thread.
fn setup_threads(deterministic: bool) -> Result<(), Failure> {
    let requested = match std::env::var("DKV_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure::config(anyhow!("DKV_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    let threads = match (deterministic, requested) {
        (true, Some(n)) if n != 1 => {
            return Err(Failure::config(anyhow!(
                "deterministic mode needs DKV_THREADS=1 (got {n})"
            )))
        }
        (true, _) => Some(1),
        (false, n) => n,
    };
    if let Some(n) = threads {
        // Fails only if a pool already exists, e.g. in tests; that pool is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load(path: &Path) -> Result<(RunConfig, Vec<u32>), Failure> {
    RunConfig::load(path).map_err(Failure::config)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(Failure::config)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, trace: &StepTrace) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" ")
}

pub struct GenerateArgs {
    pub config: PathBuf,
    pub deterministic: bool,
    pub snapshots: Option<usize>,
    pub layout_dump: bool,
    pub output_dir: Option<PathBuf>,
    pub fault: Option<Fault>,
}

pub fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let (cfg, prompt) = load(&args.config)?;
    let deterministic = args.deterministic || cfg.deterministic;
    setup_threads(deterministic)?;
    let mut sampler = cfg.sampler;
    if let Some(layer) = args.snapshots {
        if layer >= cfg.model.n_layers {
            return Err(Failure::config(anyhow!(
                "--snapshots {layer}: the model has {} layers",
                cfg.model.n_layers
            )));
        }
        sampler.snapshot_layer = Some(layer);
    }
    let out_dir = args.output_dir.unwrap_or(cfg.output_dir);
    create_dir(&out_dir)?;

    let weights = ModelWeights::init(&cfg.model).map_err(Failure::config)?;
    let options = GenerateOptions {
        timing: !deterministic,
        record_layout: args.layout_dump,
        fault: args.fault,
        ..GenerateOptions::default()
    };
    // Anything rejected before the first step is a configuration problem.
    let mut g = Generator::new(&weights, sampler, &prompt, options).map_err(Failure::config)?;
    let result = g.run();
    let out = g.finish();
    let trace_path = out_dir.join("trace.jsonl");
    write_trace(&trace_path, &out.trace).map_err(Failure::runtime)?;
    if args.layout_dump {
        write_jsonl(&out_dir.join("cache_layout.jsonl"), &out.layout).map_err(Failure::runtime)?;
    }
    if let Err(e) = result {
        return Err(Failure::runtime(anyhow!(
            "{e} (partial trace with {} steps written to {})",
            out.trace.steps(),
            trace_path.display()
        )));
    }

    fs::write(out_dir.join("sequence.txt"), join_ids(&out.sequence) + "\n").map_err(Failure::runtime)?;
    let report = RunReport::from_trace(&out.trace, &cfg.model, sampler.cache.variant.to_string())
        .map_err(Failure::runtime)?;
    let json = serde_json::to_string_pretty(&report).map_err(Failure::runtime)?;
    fs::write(out_dir.join("report.json"), json + "\n").map_err(Failure::runtime)?;

    println!("generated {} tokens in {} steps ({})", report.gen_len, report.steps, report.variant);
    println!(
        "query rows {} of {} uncached ({:.1}% fewer), cache ratio {:.3}",
        report.total_query_rows,
        report.baseline_query_rows,
        report.row_reduction * 100.0,
        report.cache_ratio
    );
    if let Some(tps) = report.tokens_per_second {
        println!("{tps:.1} tokens/s");
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    variant: String,
    tokens_per_second: Option<f64>,
    cache_ratio: f64,
    total_rows: u64,
    mac_reduction: f64,
    matches_baseline: bool,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn bench(
    config: &Path,
    variants: Option<Vec<String>>,
    repeat: usize,
    deterministic: bool,
    output_dir: Option<PathBuf>,
) -> Result<(), Failure> {
    if repeat == 0 {
        return Err(Failure::config(anyhow!("--repeat must be at least 1")));
    }
    let (cfg, prompt) = load(config)?;
    let deterministic = deterministic || cfg.deterministic;
    setup_threads(deterministic)?;
    let variants: Vec<CacheVariant> = match variants {
        Some(labels) => labels
            .iter()
            .map(|l| l.parse::<CacheVariant>().with_context(|| format!("--variants entry `{l}`")))
            .collect::<anyhow::Result<_>>()
            .map_err(Failure::config)?,
        None => vec![CacheVariant::None, cfg.cache.variant],
    };
    let out_dir = output_dir.unwrap_or(cfg.output_dir.clone());
    create_dir(&out_dir)?;
    let weights = ModelWeights::init(&cfg.model).map_err(Failure::config)?;
    let options = GenerateOptions {
        timing: !deterministic,
        ..GenerateOptions::default()
    };

    let configured = |variant: CacheVariant| {
        let mut s = cfg.sampler;
        s.cache = CacheConfig { variant, ..cfg.cache };
        s.snapshot_layer = None;
        s.validate()
            .and_then(|()| s.cache.validate(cfg.model.shifted_output).map_err(Into::into))
            .with_context(|| format!("variant {variant}"))
            .map(|()| s)
            .map_err(Failure::config)
    };
    let once = |variant: CacheVariant| -> Result<GenerationOutput, Failure> {
        run_generation(&weights, configured(variant)?, &prompt, options)
            .map_err(|f| Failure::runtime(anyhow!("variant {variant}: {}", f.error)))
    };

    let baseline = once(CacheVariant::None)?;
    let mut rows = Vec::new();
    for variant in variants {
        let mut runs = Vec::with_capacity(repeat);
        for _ in 0..repeat {
            runs.push(once(variant)?);
        }
        let first = &runs[0];
        let report = RunReport::from_trace(&first.trace, &cfg.model, variant.to_string()).map_err(Failure::runtime)?;
        let speeds: Vec<f64> = runs
            .iter()
            .map(|r| throughput(&r.trace))
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::runtime)?
            .into_iter()
            .flatten()
            .collect();
        rows.push(BenchRow {
            variant: report.variant,
            tokens_per_second: median(speeds),
            cache_ratio: report.cache_ratio,
            total_rows: report.total_query_rows,
            mac_reduction: report.mac_reduction,
            matches_baseline: first.sequence == baseline.sequence,
        });
    }

    let path = out_dir.join("bench.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Failure::runtime)?;
    for row in &rows {
        w.serialize(row).map_err(Failure::runtime)?;
    }
    w.flush().map_err(Failure::runtime)?;

    println!(
        "{:<16} {:>12} {:>11} {:>11} {:>13} {:>8}",
        "variant", "tokens/s", "cache_ratio", "total_rows", "mac_reduction", "matches"
    );
    for r in &rows {
        let tps = r.tokens_per_second.map_or("-".to_string(), |t| format!("{t:.1}"));
        println!(
            "{:<16} {:>12} {:>11.3} {:>11} {:>12.1}% {:>8}",
            r.variant,
            tps,
            r.cache_ratio,
            r.total_rows,
            r.mac_reduction * 100.0,
            r.matches_baseline
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn analyze(trace_path: &Path, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let file = File::open(trace_path)
        .with_context(|| format!("opening {}", trace_path.display()))
        .map_err(Failure::config)?;
    let trace = StepTrace::read_jsonl(BufReader::new(file))
        .with_context(|| format!("reading {}", trace_path.display()))
        .map_err(Failure::config)?;
    let dynamics = match kv_dynamics(&trace) {
        Ok(d) => d,
        Err(AnalysisError::MissingSnapshots) => {
            return Err(Failure {
                code: exit::MISSING_SNAPSHOTS,
                error: anyhow!(
                    "{} has no K/V snapshots; rerun `dkv generate` with --snapshots LAYER (or set \"snapshots\" in the config)",
                    trace_path.display()
                ),
            })
        }
        Err(e) => return Err(Failure::config(e)),
    };
    let out_dir = output_dir.unwrap_or_else(|| trace_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&out_dir)?;

    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<(), Failure> {
        let path = out_dir.join(name);
        let mut w = BufWriter::new(
            File::create(&path)
                .with_context(|| format!("creating {}", path.display()))
                .map_err(Failure::runtime)?,
        );
        f(&mut w).and_then(|()| w.flush()).map_err(Failure::runtime)
    };
    let d = &dynamics;
    write("dynamics_key_euclidean.csv", &|w| Dynamics::write_matrix_csv(&d.key_euclidean, w))?;
    write("dynamics_key_cosine.csv", &|w| Dynamics::write_matrix_csv(&d.key_cosine, w))?;
    write("dynamics_value_euclidean.csv", &|w| Dynamics::write_matrix_csv(&d.value_euclidean, w))?;
    write("dynamics_value_cosine.csv", &|w| Dynamics::write_matrix_csv(&d.value_cosine, w))?;
    write("dynamics_key_tokens.csv", &|w| Dynamics::write_tokens_csv(&d.key_tokens, w))?;
    write("dynamics_value_tokens.csv", &|w| Dynamics::write_tokens_csv(&d.value_tokens, w))?;
    write("dynamics_key_extremes.csv", &|w| Dynamics::write_extremes_csv(&d.key_tokens, w))?;
    write("dynamics_value_extremes.csv", &|w| Dynamics::write_extremes_csv(&d.value_tokens, w))?;

    println!("layer {}, {} steps", d.layer, trace.steps());
    for (label, tokens) in [("K", &d.key_tokens), ("V", &d.value_tokens)] {
        if let Some(f) = Dynamics::reveal_spike_fraction(tokens) {
            println!("{label}: change at reveal step above median for {:.1}% of tokens", f * 100.0);
        }
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

pub fn selftest(fault: Option<Fault>) -> Result<(), Failure> {
    let started = std::time::Instant::now();
    let outcomes = checks::selftest(fault);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| o.failed()).map(|o| o.name).collect();
    println!("{} checks in {:.1}s", outcomes.len(), started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: exit::SELFTEST_FAILED,
            error: anyhow!("failed: {}", failed.join(", ")),
        })
    }
}

pub fn dump_weights(config: &Path, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let (cfg, _) = load(config)?;
    let out_dir = output_dir.unwrap_or(cfg.output_dir);
    create_dir(&out_dir)?;
    let weights = ModelWeights::init(&cfg.model).map_err(Failure::config)?;
    weights.save(&out_dir, "weights").map_err(Failure::runtime)?;
    println!("wrote weights.bin and weights.json to {}", out_dir.display());
    Ok(())
}

