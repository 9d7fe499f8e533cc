use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lshmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lshmf"))
        .args(args)
        .env_remove("LSHMF_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lshmf(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Tab-separated ratings with string ids over the given user and item ranges.
fn write_ratings(dir: &Path, name: &str, users: std::ops::Range<usize>, items: std::ops::Range<usize>) -> PathBuf {
    let mut text = String::new();
    for u in users {
        for i in items.clone() {
            if (u * 7 + i * 3) % 4 == 0 {
                text.push_str(&format!("u{u}\ti{i}\t{}\t0\n", 1 + (u + 2 * i) % 5));
            }
        }
    }
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_split_train_eval() {
    let dir = TempDir::new().unwrap();
    let raw = write_ratings(dir.path(), "r.tsv", 0..40, 0..30);
    let (m, ids) = (dir.path().join("m.txt"), dir.path().join("ids.csv"));
    ok(&["ingest", "--input", s(&raw), "--output", s(&m), "--ids-output", s(&ids)]);
    assert!(std::fs::read_to_string(&m).unwrap().starts_with("LSHMF-R v1 40 30 "));
    assert!(std::fs::read_to_string(&ids).unwrap().contains("row,0,u0"));

    let (tr, te) = (dir.path().join("train.txt"), dir.path().join("test.txt"));
    ok(&["split", "--input", s(&m), "--train-output", s(&tr), "--test-output", s(&te), "--seed", "3"]);

    let (metrics, ckpt) = (dir.path().join("metrics.csv"), dir.path().join("model.ckpt"));
    let common = ["--k", "4", "--epochs", "3", "-s", "rank=4", "-s", "q=10"];
    let mut args = vec!["train", "--input", s(&tr), "--test", s(&te), "--metrics", s(&metrics), "--checkpoint", s(&ckpt)];
    args.extend(common);
    ok(&args);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,wall_seconds_cumulative,train_rmse,test_rmse");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("summary,"));
    let final_test: f64 = lines[4].split(',').nth(3).unwrap().parse().unwrap();

    let mut args = vec!["eval", "--model", s(&ckpt), "--input", s(&tr), "--test", s(&te)];
    args.extend(common);
    let out = ok(&args);
    let rmse: f64 = out.trim().strip_prefix("rmse,").unwrap().parse().unwrap();
    assert!((rmse - final_test).abs() < 1e-6);

    // identical apart from wall-clock columns when rerun
    let metrics2 = dir.path().join("metrics2.csv");
    let mut args = vec!["train", "--input", s(&tr), "--test", s(&te), "--metrics", s(&metrics2)];
    args.extend(common);
    ok(&args);
    let strip = |t: String| t.lines().map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 1).map(|(_, x)| x).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    assert_eq!(strip(csv), strip(std::fs::read_to_string(&metrics2).unwrap()));
}

#[test]
fn zero_epochs_gives_header_and_summary() {
    let dir = TempDir::new().unwrap();
    let raw = write_ratings(dir.path(), "r.tsv", 0..20, 0..15);
    let metrics = dir.path().join("m.csv");
    ok(&["train", "--input", s(&raw), "--metrics", s(&metrics), "--provider", "random", "--epochs", "0", "--k", "3", "-s", "rank=2"]);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("summary,") && lines[1].ends_with(','));
}

#[test]
fn parallel_workers_emit_stage_rows() {
    let dir = TempDir::new().unwrap();
    let raw = write_ratings(dir.path(), "r.tsv", 0..40, 0..30);
    let metrics = dir.path().join("m.csv");
    ok(&["train", "--input", s(&raw), "--metrics", s(&metrics), "--workers", "3", "--epochs", "2", "--k", "3", "-s", "rank=3", "-s", "q=5"]);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("stage,")).count(), 6);

    let racy = lshmf(&["train", "--input", s(&raw), "--metrics", s(&metrics), "--racy"]);
    assert!(!racy.status.success());
    ok(&["train", "--input", s(&raw), "--metrics", s(&metrics), "--racy", "--workers", "2", "-s", "model=basic", "--epochs", "2", "-s", "rank=3"]);
}

#[test]
fn topk_compare_reports_overlap() {
    let dir = TempDir::new().unwrap();
    let raw = write_ratings(dir.path(), "r.tsv", 0..40, 0..30);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let out = ok(&["topk", "--input", s(&raw), "--output", s(&a), "--provider", "gsm", "--compare", "gsm", "--compare-output", s(&b), "--k", "5"]);
    assert_eq!(out.trim(), "overlap,1.000000");
    let table = std::fs::read_to_string(&a).unwrap();
    assert!(table.starts_with("j,rank,neighbor\n"));
    assert_eq!(table.lines().count(), 1 + 30 * 5);
    let out = ok(&["topk", "--input", s(&raw), "--output", s(&a), "--provider", "simlsh", "--compare", "random", "--k", "5", "-s", "q=20"]);
    let overlap: f64 = out.trim().strip_prefix("overlap,").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&overlap));
}

#[test]
fn online_update_reports_delta() {
    let dir = TempDir::new().unwrap();
    let base = write_ratings(dir.path(), "base.tsv", 0..40, 0..30);
    let inc = write_ratings(dir.path(), "inc.tsv", 40..44, 0..32);
    let test = dir.path().join("test.tsv");
    std::fs::write(&test, "u41\ti3\t4\nu2\ti31\t2\nu0\ti1\t3\n").unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let hs = dir.path().join("state.h");
    let metrics = dir.path().join("m.csv");
    let common = ["--k", "4", "--epochs", "3", "-s", "rank=4", "-s", "q=10"];
    let mut args = vec!["train", "--input", s(&base), "--metrics", s(&metrics), "--checkpoint", s(&ckpt), "--hash-state", s(&hs)];
    args.extend(common);
    ok(&args);
    let out_ckpt = dir.path().join("after.ckpt");
    let mut args = vec![
        "online-update", "--model", s(&ckpt), "--base", s(&base), "--increment", s(&inc), "--test", s(&test), "--hash-state", s(&hs),
        "--checkpoint-out", s(&out_ckpt),
    ];
    args.extend(common);
    let out = ok(&args);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "rmse_before,rmse_after,delta");
    let v: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert!((v[1] - v[0] - v[2]).abs() < 1e-5);
    let header = std::fs::read(&out_ckpt).unwrap();
    assert!(header.starts_with(b"LSHMF-M v1 44 32 4 4\n"));
}

#[test]
fn bench_topk_lists_providers() {
    let out = ok(&["bench-topk", "--synthetic", "50,40,0.2", "--k", "4", "-s", "q=10"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "provider,seconds,aux_bytes,state_bytes");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["gsm", "simlsh", "minhash", "rpcos", "random"]);
    let gsm_aux: usize = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(gsm_aux, 40 * 39 / 2 * 8);
}

#[test]
fn config_file_and_env_seed() {
    let dir = TempDir::new().unwrap();
    let raw = write_ratings(dir.path(), "r.tsv", 0..20, 0..15);
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "provider = random\nk = 3\nrank = 2\nepochs = 1\n").unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let run = |out: &Path, seed: &str| {
        let st = Command::new(env!("CARGO_BIN_EXE_lshmf"))
            .args(["topk", "--input", s(&raw), "--output", s(out), "-c", s(&cfg)])
            .env("LSHMF_SEED", seed)
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read_to_string(out).unwrap()
    };
    assert_ne!(run(&a, "1"), run(&b, "2"));
    assert_eq!(run(&a, "1"), run(&b, "1"));

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    assert!(!lshmf(&["topk", "--input", s(&raw), "--output", s(&a), "-c", s(&cfg)]).status.success());
    assert!(!lshmf(&["train", "--input", "/nonexistent", "--metrics", s(&a)]).status.success());
}
