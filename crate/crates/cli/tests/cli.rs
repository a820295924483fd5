use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mobinet");

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MOBINET_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Small synthetic training run arguments.
fn tiny(out: &str, extra: &[&'static str]) -> Vec<String> {
    let cfg = repo("configs/synthetic.cfg");
    let mut v: Vec<String> = vec![
        "--config".into(),
        cfg.display().to_string(),
        "--out".into(),
        out.into(),
        "--set".into(),
        "synthetic_train=96".into(),
        "--set".into(),
        "synthetic_test=32".into(),
        "--set".into(),
        "schedule=64,128/2,128".into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_tiny(dir: &Path, sub: &str, out: &str, extra: &[&'static str]) -> Output {
    let mut args = vec![sub.to_string()];
    args.extend(tiny(out, extra));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_in(dir, &refs)
}

#[test]
fn help_snapshots() {
    let dir = repo("crates/cli/tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    for sub in ["", "train", "eval", "ablate", "flops", "bench", "export", "inspect"] {
        let mut args: Vec<&str> = if sub.is_empty() { vec![] } else { vec![sub] };
        args.push("--help");
        let o = run_in(Path::new("."), &args);
        assert_ok(&o);
        let name = if sub.is_empty() { "mobinet" } else { sub };
        let path = dir.join(format!("{name}.help.txt"));
        if update {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, stdout(&o)).unwrap();
        }
        let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
        assert_eq!(
            stdout(&o),
            expected,
            "help of `{name}` changed; rerun with UPDATE_SNAPSHOTS=1"
        );
    }
}

#[test]
fn help_documents_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("train", &["--config", "--set", "--out", "--seed", "--resume"]),
        ("eval", &["--config", "--set", "--out", "--seed", "--model"]),
        (
            "ablate",
            &["--config", "--set", "--out", "--seed", "--suite", "--seeds"],
        ),
        (
            "flops",
            &["--config", "--set", "--out", "--seed", "--resolution", "--reference"],
        ),
        (
            "bench",
            &[
                "--out",
                "--kernel",
                "--channels",
                "--size",
                "--kernel-size",
                "--k",
                "--reps",
                "--seed",
            ],
        ),
        ("export", &["--checkpoint", "--out"]),
    ];
    for (sub, flags) in expected {
        let help = stdout(&run_in(Path::new("."), &[sub, "--help"]));
        for flag in *flags {
            let line = help
                .lines()
                .find(|l| l.trim_start().starts_with(flag) && l[l.find(flag).unwrap() + flag.len()..].starts_with(' '))
                .unwrap_or_else(|| panic!("`{sub} --help` lacks {flag}"));
            assert!(
                line.trim().len() > flag.len() + 2,
                "{flag} of {sub} has no description: {line}"
            );
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run_in(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run_in(tmp.path(), &["flops", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        run_in(tmp.path(), &["flops", "--set", "nonsense=1"]).status.code(),
        Some(2)
    );
    assert_eq!(run_in(tmp.path(), &["flops", "--set", "k=99"]).status.code(), Some(2));
    assert_eq!(
        run_in(tmp.path(), &["flops", "--config", "missing.cfg"]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("junk.mobi"), b"definitely not a model").unwrap();
    let o = run_in(tmp.path(), &["inspect", "junk.mobi"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn flops_prints_effective_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = repo("configs/default.cfg");
    let o = run_in(
        tmp.path(),
        &[
            "flops",
            "--config",
            cfg.to_str().unwrap(),
            "--resolution",
            "224",
            "--out",
            "o",
        ],
    );
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.contains("effective FLOPs"), "{text}");
    assert!(tmp.path().join("o/flops.csv").exists());
    let entries: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "only the output dir may be created");
}

#[test]
fn train_is_deterministic_and_artifacts_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_ok(&run_tiny(d, "train", "a", &["--seed", "7", "--set", "epochs=2"]));
    assert_ok(&run_tiny(d, "train", "b", &["--seed", "7", "--set", "epochs=2"]));
    let ha = fs::read_to_string(d.join("a/history.csv")).unwrap();
    assert_eq!(ha, fs::read_to_string(d.join("b/history.csv")).unwrap());
    assert_eq!(ha.lines().count(), 3);
    for f in ["config.txt", "checkpoint.mobc", "model.mobi", "loss.svg"] {
        assert!(d.join("a").join(f).exists(), "missing {f}");
    }
    assert_eq!(
        fs::read(d.join("a/model.mobi")).unwrap(),
        fs::read(d.join("b/model.mobi")).unwrap()
    );

    assert_ok(&run_in(
        d,
        &["export", "--checkpoint", "a/checkpoint.mobc", "--out", "x"],
    ));
    assert_eq!(
        fs::read(d.join("x/model.mobi")).unwrap(),
        fs::read(d.join("a/model.mobi")).unwrap()
    );

    let o = run_in(d, &["inspect", "a/model.mobi"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("bit1"));
    let o = run_in(d, &["inspect", "a/checkpoint.mobc"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("epochs   2"));

    let o = run_tiny(d, "eval", "e", &["--model", "a/model.mobi"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("top1"));
    let top1 = |s: &str| s.lines().find(|l| l.starts_with("top1")).unwrap().to_string();
    let last = ha
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(3)
        .unwrap()
        .parse::<f32>()
        .unwrap();
    assert_eq!(top1(&stdout(&o)), format!("top1 {last:.2}%"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_ok(&run_tiny(d, "train", "full", &["--set", "epochs=3"]));
    assert_ok(&run_tiny(d, "train", "part", &["--set", "epochs=2"]));
    assert_ok(&run_tiny(
        d,
        "train",
        "part",
        &["--set", "epochs=3", "--resume", "part/checkpoint.mobc"],
    ));
    assert_eq!(
        fs::read_to_string(d.join("full/history.csv")).unwrap(),
        fs::read_to_string(d.join("part/history.csv")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("full/model.mobi")).unwrap(),
        fs::read(d.join("part/model.mobi")).unwrap()
    );
}

#[test]
fn ablate_skip_writes_two_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_ok(&run_tiny(d, "ablate", "ab", &["--suite", "skip", "--set", "epochs=2"]));
    let curves = fs::read_to_string(d.join("ab/ablation/skip_curves.csv")).unwrap();
    let runs: std::collections::BTreeSet<&str> = curves.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(
        runs.into_iter().collect::<Vec<_>>(),
        ["mid-k0-prelu", "vanilla-k0-prelu"]
    );
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
    for f in ["skip_summary.csv", "skip_loss.svg", "skip_top1.svg"] {
        assert!(d.join("ab/ablation").join(f).exists(), "missing {f}");
    }
}

#[test]
fn bench_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        &["bench", "--channels", "64", "--size", "6", "--reps", "2", "--out", "b"],
    );
    assert_ok(&o);
    assert!(stdout(&o).contains("binary speedup over float"));
    let csv = fs::read_to_string(tmp.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
