use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
[simulate]
n_days = 12
[model]
stage_channels = [4, 8]
attention_stages = []
mid_attention = false
time_embedding_dim = 4
[train]
epochs = 3
batch_size = 4
warmup_steps = 2
diffusion_steps = 8
beta_start = 0.1
beta_end = 0.8
[sample]
count = 3
"#;

fn wavediff(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavediff"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("WAVEDIFF_WORKSPACE")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

/// Ten weekdays of bars; day 3 misses a minute and day 7 has a crossed quote.
fn fixture_csv() -> String {
    let mut s = String::from("timestamp,bid_close,ask_close,volume\n");
    for d in 0..10u32 {
        let date = chrono::NaiveDate::from_ymd_opt(2021, 3, 1).unwrap() + chrono::Days::new(u64::from(d));
        for m in 0..390u32 {
            if d == 3 && m == 200 {
                continue;
            }
            let t = date.and_hms_opt(9, 30, 0).unwrap() + chrono::Duration::minutes(i64::from(m));
            let mid = 50.0 + 0.01 * f64::from((m * 7 + d) % 13);
            let (bid, ask) = if d == 7 && m == 10 { (mid + 0.02, mid - 0.02) } else { (mid - 0.01, mid + 0.01) };
            writeln!(s, "{},{bid:.4},{ask:.4},{}", t.format("%Y-%m-%dT%H:%M:%S"), 100 + m).unwrap();
        }
    }
    s
}

#[test]
fn print_defaults_is_a_loadable_config() {
    let dir = TempDir::new().unwrap();
    let text = ok(&wavediff(dir.path(), &["config", "print-defaults"]));
    let p = dir.path().join("d.toml");
    fs::write(&p, &text).unwrap();
    let shown = ok(&wavediff(dir.path(), &["--config", p.to_str().unwrap(), "config", "show"]));
    assert!(shown.starts_with("# config digest "));
    assert!(shown.ends_with(&text), "show differs from defaults");
    let paper = ok(&wavediff(dir.path(), &["--preset", "paper", "config", "print-defaults"]));
    assert!(paper.contains("diffusion_steps = 1000"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(code(&wavediff(dir.path(), &["ingest", missing.to_str().unwrap()])), 2);
    assert_eq!(code(&wavediff(dir.path(), &["ingest"])), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(code(&wavediff(dir.path(), &["--config", bad.to_str().unwrap(), "config", "show"])), 2);
    fs::write(&bad, "[model]\nstage_channels = [4, 4, 4, 4, 4, 4, 4, 4, 4, 4]\n").unwrap();
    assert_eq!(code(&wavediff(dir.path(), &["--config", bad.to_str().unwrap(), "simulate"])), 2);
    assert_eq!(code(&wavediff(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn ingest_keeps_complete_days_and_logs_rejections() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bars.csv");
    fs::write(&input, fixture_csv()).unwrap();
    let ws = dir.path().join("ws");
    let out = ok(&wavediff(&ws, &["ingest", input.to_str().unwrap()]));
    assert!(out.contains("retained 8 days"), "{out}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.join("data/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["days"], 8);
    assert_eq!(summary["rejected_days"], 2);
    let rejections = fs::read_to_string(ws.join("data/rejections.csv")).unwrap();
    assert!(rejections.contains("2021-03-04") && rejections.contains("2021-03-08"), "{rejections}");
    assert_eq!(fs::read_to_string(ws.join("data/days.csv")).unwrap().lines().count(), 1 + 8 * 390);
    assert!(!ws.join(".lock").exists());
}

#[test]
fn simulated_days_ingest_losslessly() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    ok(&wavediff(&a, &["--config", &cfg, "simulate"]));
    let b = dir.path().join("b");
    let days = a.join("data/days.csv");
    let out = ok(&wavediff(&b, &["--config", &cfg, "ingest", days.to_str().unwrap()]));
    assert!(out.contains("retained 12 days"), "{out}");
    assert_eq!(fs::read(&days).unwrap(), fs::read(b.join("data/days.csv")).unwrap());
}

fn run_pipeline(ws: &Path, cfg: &str) -> String {
    ok(&wavediff(ws, &["--config", cfg, "simulate"]));
    ok(&wavediff(ws, &["--config", cfg, "prepare"]));
    ok(&wavediff(ws, &["--config", cfg, "train"]));
    ok(&wavediff(ws, &["--config", cfg, "sample"]));
    ok(&wavediff(ws, &["--config", cfg, "evaluate"]))
}

#[test]
fn end_to_end_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = run_pipeline(&a, &cfg);
    for row in ["fat_tail", "slow_decay", "seasonality", "cross_correlation"] {
        assert!(report.contains(row), "{report}");
    }
    run_pipeline(&b, &cfg);
    for f in [
        "prepared/manifest.json",
        "prepared/images.wdimg",
        "model/checkpoint.wdckpt",
        "synthetic/images.wdimg",
        "synthetic/days.csv",
        "report/report.json",
        "report/crosscorr.csv",
        "report/acf_returns.svg",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(fs::read_to_string(a.join("synthetic/days.csv")).unwrap().lines().count(), 1 + 3 * 390);
    let printed = ok(&wavediff(&a, &["--config", &cfg, "report"]));
    assert!(printed.contains("corr("), "{printed}");

    // decode of the sampled container reproduces the synthetic set
    let before = fs::read(a.join("synthetic/days.csv")).unwrap();
    ok(&wavediff(&a, &["--config", &cfg, "decode"]));
    assert_eq!(before, fs::read(a.join("synthetic/days.csv")).unwrap());
}

#[test]
fn interrupted_training_resumes_to_the_same_model() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for ws in [&a, &b] {
        ok(&wavediff(ws, &["--config", &cfg, "simulate"]));
        ok(&wavediff(ws, &["--config", &cfg, "prepare"]));
    }
    ok(&wavediff(&a, &["--config", &cfg, "train"]));
    let first = ok(&wavediff(&b, &["--config", &cfg, "train", "--stop-after", "1"]));
    assert!(first.contains("stopped at epoch 1"), "{first}");
    ok(&wavediff(&b, &["--config", &cfg, "train"]));
    assert_eq!(
        fs::read(a.join("model/checkpoint.wdckpt")).unwrap(),
        fs::read(b.join("model/checkpoint.wdckpt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(a.join("model/loss.csv")).unwrap(),
        fs::read_to_string(b.join("model/loss.csv")).unwrap()
    );
}

#[test]
fn lineage_mismatch_is_refused_unless_forced() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let ws = dir.path().join("ws");
    ok(&wavediff(&ws, &["--config", &cfg, "simulate"]));
    let refused = wavediff(&ws, &["--config", &cfg, "--seed", "4", "prepare"]);
    assert_eq!(code(&refused), 1);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(&wavediff(&ws, &["--config", &cfg, "--seed", "4", "--force", "prepare"]));
}

#[test]
fn locked_workspace_exits_1() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    fs::write(dir.path().join(".lock"), "12345\n").unwrap();
    let out = wavediff(dir.path(), &["--config", &cfg, "simulate"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(dir.path().join(".lock").exists());
}

#[test]
fn sampling_refuses_a_foreign_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let ws = dir.path().join("ws");
    ok(&wavediff(&ws, &["--config", &cfg, "simulate"]));
    ok(&wavediff(&ws, &["--config", &cfg, "prepare"]));
    ok(&wavediff(&ws, &["--config", &cfg, "train", "--stop-after", "1"]));
    let path = ws.join("prepared/manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"z\": 10.0"));
    fs::write(&path, text.replacen("\"z\": 10.0", "\"z\": 9.0", 1)).unwrap();
    let out = wavediff(&ws, &["--config", &cfg, "sample"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!ws.join("synthetic/days.csv").exists());
}
