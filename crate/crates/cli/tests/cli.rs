use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mil"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mil")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "max_epochs=4\nblock_widths=8,6\nattention_dim=4\nlr=0.005\n";

/// Small focal dataset plus a config file for a fast model.
fn setup(dir: &Path) {
    let out = mil(
        &[
            "gen",
            "--out",
            "data",
            "--bags",
            "8",
            "--test-bags",
            "6",
            "--size",
            "25",
            "--dim",
            "5",
            "--seed",
            "4",
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
}

fn train_args<'a>(cmd: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        cmd,
        "--config",
        "tiny.cfg",
        "--manifest",
        "data/dev.tsv",
        "--test",
        "data/test.tsv",
        "--out",
        out,
    ]
}

#[test]
fn help_documents_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let train = stdout(&mil(&["train", "--help"], dir.path()));
    assert!(train.contains("2e-4"), "{train}");
    assert!(train.contains("default: 10"), "{train}");
    let e2e = stdout(&mil(&["e2e", "--help"], dir.path()));
    assert!(e2e.contains("2e-5"), "{e2e}");
    assert!(e2e.contains("2000"), "{e2e}");
    assert_eq!(code(&mil(&["--help"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    assert_eq!(code(&mil(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&mil(&["train", "--out", "x"], dir.path())), 1);

    fs::write(dir.path().join("bad.cfg"), "learning_rate=0.1\n").unwrap();
    let mut args = train_args("train", "r");
    args[2] = "bad.cfg";
    let out = mil(&args, dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let mut args = train_args("train", "r");
    args.extend(["--sample", "frac:1.5"]);
    assert_eq!(code(&mil(&args, dir.path())), 1);
    assert_eq!(code(&mil(&["gen", "--out", "g", "--regime", "spiky"], dir.path())), 1);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut args = train_args("train", "r");
    args[4] = "data/missing.tsv";
    assert_eq!(code(&mil(&args, dir.path())), 2);
    let out = mil(
        &[
            "heatmap",
            "--checkpoint",
            "nope.milc",
            "--bag",
            "nope.milb",
            "--out",
            "h",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_every_artifact_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    for run in ["a", "b"] {
        let mut args = train_args("train", run);
        args.extend(["--k", "2", "--sample", "count:6"]);
        let out = mil(&args, dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains('±'));
    }
    let a = dir.path().join("a");
    for f in [
        "summary.csv",
        "folds.csv",
        "run.meta",
        "curves/fold_1.csv",
        "checkpoints/fold_0.milc",
        "predictions/fold_1.csv",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let summary = fs::read(a.join("summary.csv")).unwrap();
    assert_eq!(summary, fs::read(dir.path().join("b/summary.csv")).unwrap());
    assert!(String::from_utf8_lossy(&summary).starts_with("method,auc,std,ci_lo,ci_hi\nRS-6-samples,"));

    let meta = fs::read_to_string(a.join("run.meta")).unwrap();
    for key in [
        "sampling=count:6",
        "max_epochs=4",
        "k=2",
        "# format.checkpoint=",
        "# argv=",
        "# created_unix=",
    ] {
        assert!(meta.contains(key), "run.meta lacks {key}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut args = train_args("train", "r");
    args.extend(["--k", "2", "--max-epochs", "2"]);
    assert_eq!(code(&mil(&args, dir.path())), 0);
    let meta = fs::read_to_string(dir.path().join("r/run.meta")).unwrap();
    assert!(meta.contains("max_epochs=2\n"));
    assert!(meta.contains("lr=0.005\n"));
    let curve = fs::read_to_string(dir.path().join("r/curves/fold_0.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    // run.meta is itself a config file that reproduces the run.
    let mut args = train_args("train", "again");
    args[2] = "r/run.meta";
    assert_eq!(code(&mil(&args, dir.path())), 0);
    assert_eq!(
        fs::read(dir.path().join("r/summary.csv")).unwrap(),
        fs::read(dir.path().join("again/summary.csv")).unwrap()
    );
}

#[test]
fn sweep_eval_and_heatmap_work_together() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut args = train_args("sweep", "s");
    args.extend(["--k", "2", "--grid", "count:4,full"]);
    let out = mil(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("s/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.starts_with("policy,label,mean_auc,std_auc,status\ncount:4,RS-4-samples,"));

    let preds = "s/cells/full/predictions/fold_0.csv";
    let out = mil(
        &["eval", "--predictions", preds, "--resamples", "200", "--out", "ev"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains(" - "));
    let roc = fs::read_to_string(dir.path().join("ev/roc.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n"));
    let metrics = fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap();
    assert!(metrics.starts_with("auc,ci_lo,ci_hi,level,resamples,redraws,bags,positives\n"));

    let out = mil(
        &[
            "heatmap",
            "--checkpoint",
            "s/cells/full/checkpoints/fold_0.milc",
            "--bag",
            "data/bags/test-pos-0000.milb",
            "--out",
            "maps/pos0",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = fs::read(dir.path().join("maps/pos0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n5 5\n255\n"));
    assert_eq!(pgm.len(), b"P5\n5 5\n255\n".len() + 25);
    let csv = fs::read_to_string(dir.path().join("maps/pos0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 26);
}

#[test]
fn e2e_reports_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut args = train_args("e2e", "e");
    args.extend(["--misalign", "0.1", "--resamples", "100"]);
    let out = mil(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("e/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("stage1-frozen,"));
    assert!(lines[2].starts_with("stage2-e2e,"));
    let checks = fs::read_to_string(dir.path().join("e/checks.txt")).unwrap();
    assert!(checks.contains("stage2_lr=0.0005\n"));
    assert!(!checks.contains("false"), "{checks}");
    assert!(dir.path().join("e/stage2/checkpoint.milc").is_file());

    let mut args = train_args("e2e", "e");
    args.extend(["--unfreeze", "encoder.norm"]);
    assert_eq!(code(&mil(&args, dir.path())), 1);
}

#[test]
fn gradcheck_passes_with_a_small_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = mil(&["gradcheck", "--dim", "6", "--eps", "1e-6"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("max relative error"));
    let out = mil(&["gradcheck", "--dim", "6", "--tolerance", "0"], dir.path());
    assert_eq!(code(&out), 2);
}
