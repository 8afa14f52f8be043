use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn avogcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avogcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn avogcl")
}

fn ok(args: &[&str]) -> String {
    let out = avogcl(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

fn prepared(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "prepare",
        "--synthetic",
        "--synthetic-size",
        "60,80,900",
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    data
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("model.cfg");
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "d = 8\nmax_epochs = 5\npatience = 50\nbatch_size = 256\nmode = avogcl\n";

#[test]
fn prepare_reads_a_file_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ratings.tsv");
    let mut body = String::new();
    for u in 0..6 {
        for i in 0..5 {
            body.push_str(&format!("user{u}\titem{i}\t{}\t{}\n", 1 + (u + i) % 5, 1000 + u * 10 + i));
        }
    }
    body.push_str("broken line\n");
    fs::write(&input, body).unwrap();
    let out = dir.path().join("prep");
    let stdout = ok(&[
        "prepare",
        "--input",
        s(&input),
        "--min-interactions",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("users\t6"), "{stdout}");
    assert!(stdout.contains("skipped_lines\t1"), "{stdout}");
    for f in ["train.tsv", "val.tsv", "test.tsv", "user_map.tsv", "item_map.tsv", "meta.txt", "stats.json"] {
        assert!(out.join("manifest").join(f).exists(), "missing {f}");
    }
    let again = avogcl(&["prepare", "--input", s(&input), "--out", s(&out)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    let empty = avogcl(&[
        "prepare",
        "--input",
        s(&input),
        "--min-interactions",
        "50",
        "--out",
        s(&dir.path().join("empty")),
    ]);
    assert!(!empty.status.success());
}

#[test]
fn halted_and_resumed_training_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let cfg = write_config(dir.path(), SMALL);
    let straight = dir.path().join("straight");
    let split_run = dir.path().join("split");
    ok(&["train", "--config", s(&cfg), "--split", s(&data), "--out", s(&straight)]);
    let halted = ok(&[
        "train",
        "--config",
        s(&cfg),
        "--split",
        s(&data),
        "--out",
        s(&split_run),
        "--halt-after",
        "2",
    ]);
    assert!(halted.contains("halted after epoch 2"));
    ok(&["train", "--config", s(&cfg), "--split", s(&data), "--out", s(&split_run), "--resume"]);

    let metrics = |p: &Path| fs::read_to_string(p.join("logs").join("metrics.jsonl")).unwrap();
    assert_eq!(metrics(&straight).lines().count(), 5);
    assert_eq!(metrics(&straight), metrics(&split_run));
    assert_eq!(
        fs::read_to_string(straight.join("reports").join("test.csv")).unwrap(),
        fs::read_to_string(split_run.join("reports").join("test.csv")).unwrap()
    );
    assert!(straight.join("checkpoints").join("last.ckpt").exists());
    assert!(straight.join("config.txt").exists());

    let rerun = avogcl(&["train", "--config", s(&cfg), "--split", s(&data), "--out", s(&straight)]);
    assert!(!rerun.status.success(), "existing outputs must not be overwritten silently");
}

#[test]
fn evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--split", s(&data), "--out", s(&run)]);
    let ev = dir.path().join("ev");
    let stdout = ok(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("checkpoints").join("best.ckpt")),
        "--split",
        s(&data),
        "--topk",
        "5,20",
        "--out",
        s(&ev),
    ]);
    assert!(stdout.contains("recall@5"));
    let csv = fs::read_to_string(ev.join("reports").join("eval.csv")).unwrap();
    assert!(csv.starts_with("mode,dataset,seed,phase,bucket,n,recall,ndcg,users"));
    // Header, two global rows, then 5 user and 5 item groups per cutoff.
    assert_eq!(csv.lines().count(), 1 + 2 + 2 * 5 * 2);
    assert!(csv.lines().any(|l| l.contains(",user_test1,")));
    assert!(csv.lines().any(|l| l.contains(",item_test5,")));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("reports").join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["metrics"].as_array().unwrap().len(), 2);

    let bad = avogcl(&[
        "evaluate",
        "--checkpoint",
        s(&data.join("manifest").join("meta.txt")),
        "--split",
        s(&data),
        "--out",
        s(&dir.path().join("ev2")),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).to_lowercase().contains("checkpoint"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let cfg = write_config(dir.path(), "d = 8\nlamda1 = 0.5\n");
    let out = avogcl(&["train", "--config", s(&cfg), "--split", s(&data), "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda1"));
}

#[test]
fn ablate_writes_the_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let cfg = write_config(dir.path(), "d = 8\nmax_epochs = 2\nbatch_size = 256\n");
    let out = dir.path().join("abl");
    ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--split",
        s(&data),
        "--modes",
        "sgl_edge_drop,sglc_curriculum,wo_both",
        "--grid",
        "drop_ratio=0.1,0.2",
        "--seeds",
        "1,2",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("reports").join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,setting,seed,n,metric,value,best_epoch,epochs"));
    // 3 variants x 2 settings x 2 seeds x 2 cutoffs x 2 metrics
    assert_eq!(lines.count(), 48);
}

#[test]
fn grad_check_passes() {
    let stdout = ok(&["grad-check", "--instances", "8", "--size", "10"]);
    assert!(stdout.lines().count() >= 16);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
