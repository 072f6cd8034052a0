//! End-to-end tests of the `ktda` binary.

use std::path::Path;
use std::process::{Command, Output};

fn ktda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktda")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--set", "data.size=32", "--set", "data.num_samples=6", "--max-iters", "2", "--log-every", "0"];

#[test]
fn gen_writes_an_eight_two_split_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ktda(&["gen", "--num", "10", "--size", "32", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\ttrain")).count(), 8);
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\ttest")).count(), 2);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn gen_rejects_too_few_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = ktda(&["gen", "--num", "2", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("too few samples"));
}

#[test]
fn train_writes_the_resolved_config_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&out)];
    args.extend(SMALL);
    let o = ktda(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("optim.base_lr=0.001\n"));
    assert!(config.contains("optim.poly_power=0.9\n"));
    for f in ["loss.csv", "metrics.csv", "final.ktda", "best.ktda"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 3);
}

#[test]
fn train_ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    for (name, flags) in [
        ("n0", vec!["--fmm-blocks", "0"]),
        ("da_only", vec!["--disable-kl", "--disable-mse"]),
        ("no_fam", vec!["--fam", "off", "--disable-kl", "--disable-mse"]),
    ] {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--out", p(&out)];
        args.extend(SMALL);
        args.extend(flags);
        let o = ktda(&args);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
        let row: Vec<&str> = loss.lines().nth(1).unwrap().split(',').collect();
        if name != "n0" {
            // mse and kl columns are exactly zero when disabled
            assert_eq!((row[1], row[2]), ("0e0", "0e0"), "{name}");
        }
    }
}

#[test]
fn config_errors_name_the_key_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = ktda(&["train", "--out", p(dir.path()), "--set", "optim.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("optim.learning_rate"));
    let o = ktda(&["train", "--out", p(dir.path()), "--fam", "off"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.fam"));
    let o = ktda(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_is_repeatable_and_reports_percentages() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&run)];
    args.extend(SMALL);
    assert!(ktda(&args).status.success());
    let ckpt = run.join("final.ktda");
    let first = ktda(&["eval", "--checkpoint", p(&ckpt)]);
    let second = ktda(&["eval", "--checkpoint", p(&ckpt)]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first), stdout(&second));
    let text = stdout(&first);
    assert!(text.contains("class  IoU"));
    for line in text.lines().take(3) {
        let v: f64 = line.split_whitespace().nth(1).unwrap().trim_end_matches('%').parse().unwrap();
        assert!((0.0..=100.0).contains(&v), "{line}");
        assert_eq!(line.split('.').nth(1).unwrap().len(), 3, "two decimals and a percent sign: {line}");
    }
    assert!(run.join("eval.txt").exists());
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&run)];
    args.extend(SMALL);
    assert!(ktda(&args).status.success());
    let cfg = dir.path().join("other.txt");
    std::fs::write(&cfg, "data.size=32\nmodel.head.decoder_channels=8\n").unwrap();
    let o = ktda(&["eval", "--checkpoint", p(&run.join("final.ktda")), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("decoder"), "{}", stderr(&o));
}

#[test]
fn resume_continues_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let o = ktda(&[
        "train", "--out", p(&full), "--set", "data.size=32", "--set", "data.num_samples=6", "--max-iters", "6",
        "--set", "train.checkpoint_every=3", "--log-every", "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = dir.path().join("resumed");
    let o = ktda(&["train", "--out", p(&resumed), "--resume", p(&full.join("ckpt_3.ktda")), "--log-every", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tail = |path: &Path| -> Vec<String> {
        let text = std::fs::read_to_string(path.join("loss.csv")).unwrap();
        text.lines().skip(1).map(String::from).collect()
    };
    assert_eq!(tail(&full)[3..], tail(&resumed)[..]);
    assert_eq!(std::fs::read(full.join("final.ktda")).unwrap(), std::fs::read(resumed.join("final.ktda")).unwrap());
}

#[test]
fn ablate_rejects_duplicate_run_names() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "a model.fmm.blocks=1\na model.fmm.blocks=2\n").unwrap();
    let o = ktda(&["ablate", "--grid", p(&grid), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("duplicate"));
}

#[test]
fn ablate_custom_grid_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "# depth sweep\nshallow model.fmm.blocks=0\ndeep model.fmm.blocks=1\n").unwrap();
    let out = dir.path().join("out");
    let o = ktda(&[
        "ablate", "--grid", p(&grid), "--out", p(&out), "--max-iters", "2", "--set", "data.size=32", "--set",
        "data.num_samples=6",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("deep/config.txt").exists());
}

#[test]
fn gradcheck_passes_and_detects_an_injected_fault() {
    let o = ktda(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for op in ["matmul", "conv2d", "bilinear_up", "layer_norm", "MultiHeadAttention", "total_loss", "SegModel_total_loss"] {
        assert!(text.contains(op), "{op} missing from report");
    }
    assert!(text.contains("max_rel_error"));
    let o = ktda(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL  faulty_double"));
}
