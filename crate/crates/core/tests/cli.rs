use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use subtta::io::{read_embeddings, RunConfig, STEP_CSV_HEADER};

fn subtta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subtta"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn summary_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .parse()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_error_exits_with_two() {
    assert_eq!(subtta(&["adapt", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(subtta(&[]).status.code(), Some(2));
}

#[test]
fn checks_pass_and_print_lines() {
    for cmd in ["grad-check", "eig-check"] {
        let o = subtta(&[cmd, "--seed", "3"]);
        assert!(o.status.success(), "{cmd}: {}", stdout(&o));
        let out = stdout(&o);
        assert!(out.lines().count() >= 5);
        assert!(out.lines().all(|l| l.starts_with("PASS")));
    }
}

#[test]
fn synth_gen_then_adapt_on_files() {
    let dir = tempfile::tempdir().unwrap();
    let (images, anchors) = (dir.path().join("x.seb"), dir.path().join("t.seb"));
    let o = subtta(&[
        "synth-gen", "--seed", "2", "--samples-per-class", "64",
        "--out-images", p(&images), "--out-anchors", p(&anchors),
    ]);
    assert!(o.status.success());
    let x = read_embeddings(&images).unwrap();
    assert_eq!((x.rows, x.dim), (640, 64));
    assert_eq!(x.labels.as_ref().unwrap().len(), 640);
    assert_eq!(read_embeddings(&anchors).unwrap().rows, 10);

    let out = dir.path().join("run");
    let o = subtta(&[
        "adapt", "--images", p(&images), "--images", p(&images), "--anchors", p(&anchors),
        "--reset-between-segments", "--out-dir", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary_value(&stdout(&o), "batches"), 20.0);
    let csv = fs::read_to_string(out.join("steps.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(STEP_CSV_HEADER));
    assert_eq!(csv.lines().count(), 21);
    let cfg = RunConfig::load(&out.join("run.cfg")).unwrap();
    assert!(cfg.tta.reset_between_segments);
}

#[test]
fn saved_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = subtta(&[
        "adapt", "--samples-per-class", "64", "--seed", "5", "--objective", "icv",
        "--alpha", "0.3", "--out-dir", p(&a),
    ]);
    assert!(o.status.success());
    let cfg = a.join("run.cfg");
    assert!(subtta(&["adapt", "--config", p(&cfg), "--out-dir", p(&b)]).status.success());
    for f in ["run.cfg", "steps.csv", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_shot_flags_match_diagnose_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (images, anchors) = (dir.path().join("x.seb"), dir.path().join("t.seb"));
    subtta(&["synth-gen", "--seed", "1", "--out-images", p(&images), "--out-anchors", p(&anchors)]);
    let diag = subtta(&[
        "diagnose", "--images", p(&images), "--anchors", p(&anchors),
        "--out", p(&dir.path().join("d.csv")),
    ]);
    assert!(diag.status.success());
    let source = summary_value(&stdout(&diag), "source_accuracy");
    let run = subtta(&[
        "adapt", "--images", p(&images), "--anchors", p(&anchors), "--no-align", "--no-project",
        "--out-dir", p(&dir.path().join("z")),
    ]);
    let text = stdout(&run);
    assert_eq!(summary_value(&text, "adapted_accuracy"), source);
    assert_eq!(summary_value(&text, "source_accuracy"), source);
    let rows = fs::read_to_string(dir.path().join("d.csv")).unwrap().lines().count();
    assert_eq!(rows, 3201);
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.seb");
    fs::write(&junk, b"not an embedding file").unwrap();
    let o = subtta(&["adapt", "--images", p(&junk), "--anchors", p(&junk), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    let o = subtta(&["adapt", "--images", p(&junk), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = subtta(&["adapt", "--alpha", "1.5", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
