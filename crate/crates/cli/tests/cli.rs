use std::path::Path;
use std::process::{Command, Output};

fn quasar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn generate_store(dir: &Path, rows: u64, extra: &[&str]) -> String {
    let out_dir = dir.to_str().unwrap().to_string();
    let rows_s = rows.to_string();
    let mut args = vec![
        "--seed", "42", "generate", "--out", &out_dir, "--rows", &rows_s, "--cols", "48",
    ];
    args.extend_from_slice(extra);
    let out = quasar(&args);
    assert!(
        out.status.success(),
        "generate failed: {}",
        stderr(&out)
    );
    dir.join("manifest.toml").to_str().unwrap().to_string()
}

#[test]
fn generate_writes_store_and_reports_manifest() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 1920, &[]);
    assert!(Path::new(&manifest).exists());
    for shard in std::fs::read_dir(dir.path()).unwrap() {
        assert!(shard.unwrap().metadata().unwrap().len() > 0);
    }
}

#[test]
fn generate_preset_reports_plate_mix_entropy() {
    let dir = tempfile::TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = quasar(&[
        "generate", "--out", out_dir, "--rows", "1920", "--cols", "48", "--tahoe-like",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("plate mix entropy: 3.780 bits"),
        "missing entropy line in {text:?}"
    );
}

#[test]
fn generate_rejects_inverted_density_range() {
    let dir = tempfile::TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = quasar(&[
        "generate", "--out", out_dir, "--rows", "1920", "--nnz-min", "9", "--nnz-max", "4",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--nnz-min"));
}

#[test]
fn generate_rejects_other_shard_counts() {
    let dir = tempfile::TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = quasar(&["generate", "--out", out_dir, "--rows", "1920", "--shards", "7"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("14"));
}

#[test]
fn entropy_emits_versioned_csv_deterministically() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 19_200, &[]);
    let args = [
        "--manifest", &manifest, "entropy",
        "--blocks", "1,16,64", "--fetch-factors", "1,16", "--n-batches", "32",
    ];
    let first = quasar(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = stdout(&first);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema: entropy/v1"));
    assert_eq!(
        lines.next(),
        Some("b,f,batch_size,n_batches,mean_bits,std_bits,se_bits,h_p_bits,lower_bits,upper_bits,sandwich")
    );
    assert_eq!(text.lines().count(), 2 + 6);
    let plate_mix = "3.780069";
    assert!(text.contains(plate_mix), "h_p column should be the plate mix entropy");
    let second = quasar(&args);
    assert_eq!(text, stdout(&second), "same seed must reproduce the table");
}

#[test]
fn entropy_table_orders_block_sizes_as_expected() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 19_200, &[]);
    let out = quasar(&[
        "--manifest", &manifest, "entropy",
        "--blocks", "16", "--fetch-factors", "1,256", "--n-batches", "48",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mean = |line: &str| -> f64 { line.split(',').nth(4).unwrap().parse().unwrap() };
    let f1 = text.lines().nth(2).unwrap();
    let f256 = text.lines().nth(3).unwrap();
    assert!(
        mean(f256) > mean(f1) + 1.0,
        "batched fetching should lift entropy well above f=1: {text}"
    );
}

#[test]
fn entropy_writes_to_out_file_and_prints_json_summary() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 1920, &[]);
    let csv_path = dir.path().join("grid.csv");
    let out = quasar(&[
        "--manifest", &manifest, "--json", "--out", csv_path.to_str().unwrap(),
        "entropy", "--blocks", "4", "--fetch-factors", "4", "--n-batches", "16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("# schema: entropy/v1\n"));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["command"], "entropy");
    assert_eq!(summary["cells"], 1);
}

#[test]
fn validate_passes_without_a_manifest() {
    let out = quasar(&["validate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("ok: epoch coverage"));
    assert!(text.contains("ok: partition sweep"));
    assert!(text.contains("ok: shard corruption detection"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn validate_covers_the_requested_topology() {
    let out = quasar(&["--ranks", "3", "--workers", "2", "validate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("ok: rank plan agreement"));
}

#[test]
fn train_runs_selected_strategies() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(
        dir.path(),
        19_200,
        &[
            "--labels", "windowed", "--classes", "27", "--window", "9",
            "--values", "signal",
        ],
    );
    let out = quasar(&[
        "--manifest", &manifest, "train",
        "--seeds", "5", "--strategies", "streaming,block_shuffling",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("# schema: experiments/v1\n"));
    assert!(text.contains("streaming,fine27,5,"));
    assert!(text.contains("block_shuffling,broad4,5,"));
    assert!(!text.contains("streaming_buffered"));
}

#[test]
fn train_rejects_unknown_strategy_names() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 1920, &[]);
    let out = quasar(&["--manifest", &manifest, "train", "--strategies", "bogus"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("bogus") && err.contains("block_shuffling"), "{err}");
}

#[test]
fn rank_flags_are_rejected_by_non_rank_aware_commands() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 1920, &[]);
    let out = quasar(&["--manifest", &manifest, "--ranks", "2", "train"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("not rank-aware"), "{}", stderr(&out));
}

#[test]
fn bench_emits_versioned_csv_with_baselines() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 19_200, &[]);
    let out = quasar(&[
        "--manifest", &manifest, "bench",
        "--blocks", "16", "--fetch-factors", "4",
        "--warmup-secs", "0.05", "--measure-secs", "0.2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("# schema: bench/v1\n"));
    assert!(text.contains("\nblock_shuffling,16,4,1,"));
    assert!(text.contains("\nblock_shuffling,1,1,1,"), "random baseline row missing: {text}");
    assert!(text.contains("\nstreaming,1,1,1,"), "streaming baseline row missing: {text}");
    let baseline = text
        .lines()
        .find(|l| l.starts_with("block_shuffling,1,1,1,"))
        .unwrap();
    assert_eq!(baseline.split(',').next_back(), Some("1.000"));
}

#[test]
fn bench_rejects_rank_out_of_range() {
    let dir = tempfile::TempDir::new().unwrap();
    let manifest = generate_store(dir.path(), 1920, &[]);
    let out = quasar(&[
        "--manifest", &manifest, "--ranks", "2", "--rank", "2", "bench",
        "--blocks", "4", "--fetch-factors", "1",
        "--warmup-secs", "0.05", "--measure-secs", "0.1",
    ]);
    assert!(!out.status.success());
}
