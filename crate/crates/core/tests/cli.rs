use std::path::Path;
use std::process::{Command, Output};

fn ecoc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecoc"))
        .current_dir(dir)
        .env("ECOC_WORKERS", "2")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const DATA: &str = "M=4,dims=8,sep=8,per_class=40,seed=1";

fn train(dir: &Path) {
    let o = ecoc(
        dir,
        &["train", "--synthetic", DATA, "--epochs", "4", "--dense-widths", "16", "--hidden", "8", "--out", "run"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next().unwrap(), "epoch,split,loss,error");
    assert_eq!(out.lines().count(), 1 + 4 * 2 * 2);
    assert!(stderr(&o).contains("ensemble test error"));
    for f in ["model.ckpt", "base.ckpt", "training.csv", "manifest.json"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn codes_prints_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecoc(dir.path(), &["codes", "--classes", "10"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0].split_whitespace().count(), 16);
    assert_eq!(lines[10], "min distance: 8");
    assert_eq!(code(&ecoc(dir.path(), &["codes", "--classes", "10", "--length", "12"])), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&ecoc(p, &[])), 2);
    assert_eq!(code(&ecoc(p, &["frobnicate"])), 2);
    assert_eq!(code(&ecoc(p, &["--help"])), 0);
    assert_eq!(code(&ecoc(p, &["train"])), 2);
    let o = ecoc(p, &["train", "--idx-images", "nope.gz", "--idx-labels", "nope.gz"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no such file"));
    assert!(stderr(&o).contains("Usage: ecoc train"));
    assert_eq!(code(&ecoc(p, &["train", "--synthetic", "M=4,bogus=2"])), 2);
    assert_eq!(code(&ecoc(p, &["report", "missing.csv"])), 2);
}

#[test]
fn train_attack_report_replay() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    train(p);
    let common = ["--checkpoint", "run/model.ckpt", "--synthetic", DATA, "--images", "4"];

    let mut args = vec!["attack"];
    args.extend(common);
    args.extend(["--kind", "proposed", "--params", "1e-3,4,100,0", "--out", "proposed.csv"]);
    let o = ecoc(p, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("asr"));
    assert!(p.join("proposed.summary.csv").exists());
    assert!(p.join("proposed.manifest.json").exists());
    let text = std::fs::read_to_string(p.join("proposed.csv")).unwrap();
    assert!(text.starts_with("image_id,true_class,target_class,attack,"));
    assert_eq!(text.lines().count(), 5);

    // Job file keys override flags.
    std::fs::write(p.join("job.toml"), "kind = \"cw-ecoc\"\nparams = \"1e-3,3,50,-1\"\nimages = 3\n").unwrap();
    let mut args = vec!["attack"];
    args.extend(common);
    args.extend(["--job", "job.toml", "--out", "cw.csv"]);
    assert_eq!(code(&ecoc(p, &args)), 0);
    let text = std::fs::read_to_string(p.join("cw.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().contains(",cw-ecoc,"));

    std::fs::write(p.join("bad.toml"), "kind = \"proposed\"\nsurprise = 1\n").unwrap();
    let mut args = vec!["attack"];
    args.extend(common);
    args.extend(["--job", "bad.toml"]);
    assert_eq!(code(&ecoc(p, &args)), 2);

    let mut args = vec!["attack"];
    args.extend(common);
    args.extend(["--kind", "cw-onehot"]);
    let o = ecoc(p, &args);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("refused"));

    let mut args = vec!["attack"];
    args.extend(common);
    args.extend(["--kind", "nonsense"]);
    assert_eq!(code(&ecoc(p, &args)), 2);

    let o = ecoc(
        p,
        &["attack", "--checkpoint", "run/base.ckpt", "--synthetic", DATA, "--images", "3", "--kind", "lots", "--params", "1,1,100,0", "--out", "lots.csv"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = ecoc(p, &["report", "proposed.csv", "cw.csv", "lots.csv", "--out", "rep", "--bins", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["summary.csv", "confidence.csv", "histogram-clean.csv", "histogram-adversarial.csv", "asr-psnr.csv", "manifest.json"] {
        assert!(p.join("rep").join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(p.join("rep/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    let hist = std::fs::read_to_string(p.join("rep/histogram-clean.csv")).unwrap();
    assert_eq!(hist.lines().count(), 11);

    std::fs::write(p.join("empty.csv"), ecoc::evaluation::AttackRecord::HEADER.join(",") + "\n").unwrap();
    assert_eq!(code(&ecoc(p, &["report", "empty.csv"])), 2);

    let o = ecoc(p, &["replay", "proposed.manifest.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("reproduced 2 outputs"));
    let o = ecoc(p, &["replay", "run/manifest.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // Appending extends the file, and such runs are not replayable.
    let mut args = vec!["attack"];
    args.extend(common);
    args.extend(["--kind", "proposed", "--params", "1e-3,2,20,0", "--out", "proposed.csv", "--append"]);
    assert_eq!(code(&ecoc(p, &args)), 0);
    let text = std::fs::read_to_string(p.join("proposed.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert_eq!(code(&ecoc(p, &["replay", "proposed.manifest.json"])), 2);

    // A tampered output is detected.
    let o = ecoc(p, &["replay", "run/manifest.json"]);
    assert_eq!(code(&o), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("cw.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "attack");
    assert!(manifest["seeds"].as_object().unwrap().contains_key("attack"));
    let mut edited = manifest.clone();
    edited["outputs"][0]["sha256"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(p.join("tampered.json"), serde_json::to_string(&edited).unwrap()).unwrap();
    assert_eq!(code(&ecoc(p, &["replay", "tampered.json"])), 1);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecoc(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS ")).count() >= 7);
    assert!(!out.contains("FAIL "));
}
