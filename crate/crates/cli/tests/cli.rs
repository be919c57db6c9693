use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_MODEL: &str = r#"{
    "n_layers": 2, "n_heads": 2, "d_model": 16, "d_head": 8, "d_ff": 32,
    "vocab_size": 32, "mask_token_id": 31, "max_positions": 256, "weight_seed": 7
}"#;

fn config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path
}

fn tiny_config(dir: &Path, cache: &str) -> std::path::PathBuf {
    config(
        dir,
        &format!(
            r#"{{
                "model": {TINY_MODEL},
                "sampler": {{"gen_len": 16, "steps": 8, "block_size": 8, "remasking": "random", "sample_seed": 5}},
                "cache": {cache},
                "prompt": [1, 2, 3, 4, 5],
                "output_dir": "{}"
            }}"#,
            dir.join("out").display()
        ),
    )
}

fn dkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkv"))
        .args(args)
        .env_remove("DKV_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_outputs_reproducibly() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"variant": {"kind": "decode", "refresh_interval": 4}}"#);
    let out = dir.path().join("out");

    let first = dkv(&["generate", "--config", path(&cfg), "--deterministic", "--layout-dump"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let read = |name: &str| fs::read(out.join(name)).unwrap();
    let (seq, trace, report) = (read("sequence.txt"), read("trace.jsonl"), read("report.json"));
    let ids: Vec<u32> = String::from_utf8(seq.clone())
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(ids.len(), 21);
    assert_eq!(&ids[..5], &[1, 2, 3, 4, 5]);
    assert!(!ids.contains(&31));
    assert_eq!(trace.iter().filter(|&&b| b == b'\n').count(), 8);
    assert_eq!(fs::read_to_string(out.join("cache_layout.jsonl")).unwrap().lines().count(), 8);
    let report: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(report["variant"], "decode:4");
    assert!(report.get("tokens_per_second").is_none());

    let second = dkv(&["generate", "--config", path(&cfg), "--deterministic"]);
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert_eq!(read("sequence.txt"), seq);
    assert_eq!(read("trace.jsonl"), trace);
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), r#"{"sampler": {"gen_len": -1, "steps": 4, "block_size": 4}}"#);
    let o = dkv(&["generate", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sampler.gen_len"), "{}", stderr(&o));

    let cfg = config(dir.path(), r#"{"sampler": {"gen_len": 8, "steps": 4, "block_size": 4}, "cahce": {}}"#);
    let o = dkv(&["generate", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cahce"), "{}", stderr(&o));

    let cfg = config(dir.path(), r#"{"sampler": {"gen_len": 8, "steps": 9, "block_size": 4}}"#);
    let o = dkv(&["generate", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sampler"), "{}", stderr(&o));
}

#[test]
fn deterministic_mode_rejects_extra_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "{}");
    let o = Command::new(env!("CARGO_BIN_EXE_dkv"))
        .args(["generate", "--config", path(&cfg), "--deterministic"])
        .env("DKV_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("DKV_THREADS"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_keeps_partial_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"variant": {"kind": "decode"}}"#);
    let o = dkv(&["generate", "--config", path(&cfg), "--inject-fault", "reorder-index"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("out/trace.jsonl")).unwrap();
    assert!(!trace.is_empty());
    assert!(!dir.path().join("out/sequence.txt").exists());
}

#[test]
fn analyze_needs_snapshots() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "{}");
    let trace = dir.path().join("out/trace.jsonl");

    assert_eq!(dkv(&["generate", "--config", path(&cfg), "--deterministic"]).status.code(), Some(0));
    let o = dkv(&["analyze", path(&trace)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("--snapshots"), "{}", stderr(&o));

    let g = dkv(&["generate", "--config", path(&cfg), "--deterministic", "--snapshots", "1"]);
    assert_eq!(g.status.code(), Some(0), "{}", stderr(&g));
    let a = dkv(&["analyze", path(&trace)]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let matrix = fs::read_to_string(dir.path().join("out/dynamics_key_euclidean.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 9);
    let tokens = fs::read_to_string(dir.path().join("out/dynamics_value_tokens.csv")).unwrap();
    assert_eq!(tokens.lines().count(), 17);

    let bad = dkv(&["generate", "--config", path(&cfg), "--snapshots", "2"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bench_compares_variants_with_baseline() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "{}");
    let o = dkv(&[
        "bench",
        "--config",
        path(&cfg),
        "--variants",
        "none,decode:1,decode:4,prefill,pd:2,greedy:4:2",
        "--repeat",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rd = csv::Reader::from_path(dir.path().join("out/bench.csv")).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["variant", "tokens_per_second", "cache_ratio", "total_rows", "mac_reduction", "matches_baseline"]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(&rows[0][0], "none");
    assert_eq!(&rows[0][3], (8 * 21).to_string());
    for name in ["none", "decode:1"] {
        let row = rows.iter().find(|r| &r[0] == name).unwrap();
        assert_eq!(&row[5], "true", "{name}");
    }
    for row in &rows {
        assert!(row[1].parse::<f64>().unwrap() > 0.0);
    }

    let o = dkv(&["bench", "--config", path(&cfg), "--variants", "decode:x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn deterministic_bench_leaves_throughput_blank() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "{}");
    let o = dkv(&["bench", "--config", path(&cfg), "--variants", "decode:8", "--deterministic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/bench.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("decode:8,,"), "{text}");
}

#[test]
fn dump_weights_writes_sidecar() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "{}");
    let out = dir.path().join("w");
    let o = dkv(&["dump-weights", "--config", path(&cfg), "--output-dir", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bin = fs::read(out.join("weights.bin")).unwrap();
    let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(out.join("weights.json")).unwrap()).unwrap();
    assert_eq!(bin.len() % 4, 0);
    assert!(sidecar.to_string().contains("weight_seed"));
}

#[test]
fn selftest_passes_and_catches_a_bad_reorder_index() {
    let ok = dkv(&["selftest"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));

    let bad = dkv(&["selftest", "--inject-fault", "reorder-index"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&bad.stdout).into_owned() + &stderr(&bad);
    assert!(text.contains("layout soundness"), "{text}");
}
