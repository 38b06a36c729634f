use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_propd");

fn config(dir: &Path, mode: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{mode}.toml"));
    let text = format!(
        r#"
[backend]
kind = "synthetic"
seed = 5

[backend.synthetic]
vocab = 500
layers = 8
q = [[0.7, 0.1], [0.5, 0.2], [0.4, 0.2]]
early_quality = [0.8]

[engine]
mode = "{mode}"
k_max = 2
static_size = 8

[engine.prune]
prune_layer = 2
prune_topk = 40

[workload]
num_prompts = 6
prompt_len = 8
max_tokens = 24
batch_size = 3
{extra}
"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn propd(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run(cfg: &Path, out: &Path) -> Output {
    let o = propd(&["run", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn transcripts(out: &Path) -> Vec<String> {
    let mut files: Vec<_> = fs::read_dir(out.join("transcripts")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|f| fs::read_to_string(f).unwrap()).collect()
}

fn summary_field(out: &Path, name: &str) -> String {
    let text = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    row[header.iter().position(|h| *h == name).unwrap()].to_string()
}

#[test]
fn autoregressive_run_writes_transcripts_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "autoregressive", "");
    let out = tmp.path().join("out");
    run(&cfg, &out);
    let ts = transcripts(&out);
    assert_eq!(ts.len(), 6);
    assert!(ts.iter().all(|t| t.split_whitespace().count() == 24));
    assert_eq!(summary_field(&out, "tokens"), "144");
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2 * 24);
}

#[test]
fn tree_modes_agree_on_text_but_not_on_time() {
    let tmp = TempDir::new().unwrap();
    let (full, stat, ar) = (tmp.path().join("full"), tmp.path().join("static"), tmp.path().join("ar"));
    run(&config(tmp.path(), "propd_full", ""), &full);
    run(&config(tmp.path(), "static_tree", ""), &stat);
    run(&config(tmp.path(), "autoregressive", ""), &ar);
    assert_eq!(transcripts(&full), transcripts(&stat));
    assert_eq!(transcripts(&full), transcripts(&ar));
    assert_ne!(summary_field(&full, "total_time_ms"), summary_field(&stat, "total_time_ms"));
}

#[test]
fn verbose_run_dumps_model_state() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "propd_full", "");
    let out = tmp.path().join("out");
    let o = propd(&["run", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--verbose"]);
    assert!(o.status.success());
    for f in ["acceptance_stats.csv", "cost_model.csv", "plan_events.jsonl"] {
        assert!(!fs::read_to_string(out.join(f)).unwrap().is_empty(), "{f}");
    }
}

#[test]
fn bad_mode_is_rejected_with_a_location() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "turbo", "");
    let o = propd(&["run", "--config", cfg.to_str().unwrap(), "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 13"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn out_of_range_values_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "prune_only", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("prune_layer = 2", "prune_layer = 99");
    fs::write(&cfg, text).unwrap();
    let o = propd(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("prune_layer"));
}

fn sweep_rows(axis: &str, extra: &str) -> Vec<String> {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "propd_full", extra);
    let out = tmp.path().join("sweep");
    let o = propd(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", axis, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join(format!("sweep_{axis}.csv"))).unwrap();
    csv.lines().skip(1).map(str::to_string).collect()
}

#[test]
fn sweeps_have_one_row_per_setting() {
    let small = "\n[sweep]\nbatch = [1, 2, 3, 4, 6]\n";
    assert_eq!(sweep_rows("batch", small).len(), 5);
    assert_eq!(sweep_rows("mode", "").len(), 4);
    let grid = "\n[sweep]\nprune_layer = [1, 2, 3, 4]\nprune_topk = [10, 20, 40, 80]\n";
    assert_eq!(sweep_rows("prune_layer", grid).len(), 16);
}

#[test]
fn selftest_passes() {
    let o = propd(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "propd_full", "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a);
    run(&cfg, &b);
    assert_eq!(transcripts(&a), transcripts(&b));
    for f in ["metrics.jsonl", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_workload() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "propd_full", "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a);
    let o = propd(&["run", "--config", cfg.to_str().unwrap(), "--out-dir", b.to_str().unwrap(), "--seed-override", "77"]);
    assert!(o.status.success());
    assert_ne!(transcripts(&a), transcripts(&b));
}
