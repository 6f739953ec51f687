use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use unetdr::losses::LossKind;
use unetdr::metrics::MetricsReport;
use unetdr::preprocess::{read_labels, read_volume};
use unetdr::trainer::load_checkpoint;

fn unetdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unetdr")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom_set(root: &Path, cases: usize) -> PathBuf {
    let data = root.join("data");
    let o = unetdr(&["phantom", "--cases", &cases.to_string(), "--out", s(&data), "--seed", "7", "--dims", "16x32x32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut dirs = vec![root.to_path_buf()];
    while let Some(d) = dirs.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                dirs.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn phantom_writes_cases_deterministically() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = unetdr(&["phantom", "--cases", "5", "--out", s(out), "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).lines().count(), 5);
    }
    let ta = tree_bytes(&a);
    assert_eq!(ta.len(), 10);
    assert!(ta.iter().any(|(p, _)| p == Path::new("case_004/labels.nii")));
    assert_eq!(ta, tree_bytes(&b));
}

#[test]
fn invalid_arguments_fail() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    let o = unetdr(&["phantom", "--cases", "0", "--out", s(&out)]);
    assert!(!o.status.success());
    let o = unetdr(&["phantom", "--cases", "2", "--out", s(&out), "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--bogus"));
    let o = unetdr(&["phantom", "--cases", "2", "--out", s(&out), "--dims", "8x8x8"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("too small"), "{}", stderr(&o));
}

#[test]
fn help_documents_every_flag() {
    let expected: [(&str, &[&str]); 4] = [
        ("phantom", &["--cases", "--out", "--seed", "--dims", "--noise"]),
        (
            "train",
            &["--data", "--out", "--stage", "--fold", "--loss", "--resume", "--epochs", "--seed", "--jobs", "--set", "--config"],
        ),
        ("predict", &["--ckpt", "--in", "--out", "--no-postprocess"]),
        ("evaluate", &["--gt", "--pred", "--report"]),
    ];
    for (cmd, flags) in expected {
        let o = unetdr(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn training_flag_errors() {
    let tmp = TempDir::new().unwrap();
    let data = phantom_set(tmp.path(), 5);
    let out = tmp.path().join("run");
    let o = unetdr(&["train", "--data", s(&data), "--out", s(&out), "--stage", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--resume"), "{}", stderr(&o));
    let o = unetdr(&["train", "--data", s(&data), "--out", s(&out), "--stage", "1", "--loss", "tversky"]);
    assert_eq!(o.status.code(), Some(2));
    let o = unetdr(&["train", "--data", s(&data), "--out", s(&out), "--stage", "1", "--fold", "9"]);
    assert_eq!(o.status.code(), Some(2));
    let o = unetdr(&["train", "--data", s(&data), "--out", s(&out), "--stage", "3"]);
    assert!(!o.status.success());
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 1\n").unwrap();
    let o = unetdr(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--stage", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"));
}

/// Stage 1 and stage 2 smoke runs, then prediction and evaluation with the result.
#[test]
fn train_predict_evaluate_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = phantom_set(tmp.path(), 5);
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# small and quick\nbatch_size = 8\nlr = 0.001\ncrop = 32x32\n").unwrap();

    let o = unetdr(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--stage", "1", "--fold", "0", "--epochs", "2", "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fold = out.join("fold_0");
    let log = std::fs::read_to_string(fold.join("stage1.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("epoch=") && l.contains("stage=1") && l.contains("val_dsc=")));
    let s1 = load_checkpoint(&fold.join("stage1_best.ckpt")).unwrap();
    assert_eq!(s1.loss.kind, LossKind::Dice);
    assert_eq!(s1.base_lr, 0.001);
    assert!(std::fs::read_to_string(out.join("folds.txt")).unwrap().starts_with("fold=0 train="));

    let o = unetdr(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--stage", "2", "--fold", "0", "--epochs", "1", "--seed", "3",
        "--loss", "tversky", "--resume", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = fold.join("stage2_best.ckpt");
    let s2 = load_checkpoint(&ckpt).unwrap();
    assert_eq!(s2.loss.kind, LossKind::Tversky);
    assert_eq!(s2.stage, 2);
    assert!(stdout(&o).contains("loss=tversky"));

    let image = data.join("case_000/image.nii");
    let gt = data.join("case_000/labels.nii");
    let pred = tmp.path().join("pred.nii");
    let pred_raw = tmp.path().join("pred_raw.nii");
    let pred_again = tmp.path().join("pred_again.nii");
    for (path, extra) in [(&pred, None), (&pred_raw, Some("--no-postprocess")), (&pred_again, None)] {
        let mut args = vec!["predict", "--ckpt", s(&ckpt), "--in", s(&image), "--out", s(path)];
        args.extend(extra);
        let o = unetdr(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&pred).unwrap(), std::fs::read(&pred_again).unwrap());
    let filtered = read_labels(&pred).unwrap();
    let unfiltered = read_labels(&pred_raw).unwrap();
    assert_eq!(filtered.dims(), [16, 32, 32]);
    assert!(filtered.data().iter().all(|&l| l < 5));
    for c in 1..5u8 {
        assert!(filtered.mask(c).is_subset_of(&unfiltered.mask(c)));
    }
    assert_eq!(read_volume(&pred).unwrap().spacing, read_volume(&image).unwrap().spacing);

    let report = tmp.path().join("report.txt");
    let o = unetdr(&["evaluate", "--gt", s(&gt), "--pred", s(&gt), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Metric", "Esophagus", "Heart", "Trachea", "Aorta", "Mean"]);
    assert!(table.contains("DSC            1.0000     1.0000     1.0000     1.0000     1.0000"), "{table}");
    assert!(table.lines().nth(2).unwrap().split_whitespace().skip(2).all(|v| v == "0.0000"), "{table}");
    let parsed = MetricsReport::from_text(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.mean_dsc, 1.0);
    assert_eq!(parsed.mean_hd, Some(0.0));

    let o = unetdr(&["evaluate", "--gt", s(&gt), "--pred", s(&pred), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(MetricsReport::from_text(&text).unwrap().to_text(), text);

    let small = tmp.path().join("small");
    let o = unetdr(&["phantom", "--cases", "1", "--out", s(&small), "--dims", "16x32x48"]);
    assert!(o.status.success());
    let o = unetdr(&["evaluate", "--gt", s(&gt), "--pred", s(&small.join("case_000/labels.nii"))]);
    assert!(!o.status.success());
}

#[test]
fn interrupted_stage_one_resumes_to_the_same_result() {
    let tmp = TempDir::new().unwrap();
    let data = phantom_set(tmp.path(), 5);
    let base = ["--set", "batch_size=16", "--set", "crop=32x32", "--set", "depth=2", "--fold", "1", "--seed", "5"];
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");
    let run = |out: &Path, epochs: &str, resume: Option<&Path>| {
        let mut args = vec!["train", "--data", s(&data), "--out", s(out), "--stage", "1", "--epochs", epochs];
        args.extend(base);
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        let o = unetdr(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run(&full, "3", None);
    run(&split, "1", None);
    run(&split, "3", Some(&split.join("fold_1/stage1_last.ckpt")));
    let a = std::fs::read_to_string(full.join("fold_1/stage1.log")).unwrap();
    let b = std::fs::read_to_string(split.join("fold_1/stage1.log")).unwrap();
    assert_eq!(a.lines().count(), 3);
    assert_eq!(a, b);
    for f in ["stage1_best.ckpt", "stage1_last.ckpt"] {
        assert_eq!(std::fs::read(full.join("fold_1").join(f)).unwrap(), std::fs::read(split.join("fold_1").join(f)).unwrap());
    }
}
