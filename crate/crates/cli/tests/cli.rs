use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vidrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidrefine"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vidrefine(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synth(out: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth", "--out", s(out), "--s", "3", "--b", "1", "--c", "4", "--t", "3", "--sequences", "6", "--seed", "11",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    small_synth(&a, &[]);
    small_synth(&b, &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.bin");
    small_synth(&c, &["--miss-prob", "0.5"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn train_eval_infer_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("train.log");
    small_synth(&data, &[]);
    ok(&[
        "train", "--data", s(&data), "--out", s(&ckpt), "--log", s(&log), "--hidden", "6,5", "--epochs", "3",
        "--batch-size", "4", "--dropout", "0", "--candidate", "tanh",
    ]);
    let history = fs::read_to_string(&log).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.lines().all(|l| l.starts_with("epoch=") && l.contains(" total=")));

    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--records", "--baseline"]);
    assert!(table.lines().any(|l| l.starts_with("map value=")), "{table}");
    assert!(table.lines().any(|l| l.starts_with("baseline ")));

    let dets = ok(&["infer", "--checkpoint", s(&ckpt), "--data", s(&data), "--index", "2"]);
    let first = dets.lines().next().unwrap();
    assert!(first.starts_with("sequence id=seq-00002 frames=3"), "{first}");
    assert!(dets.lines().skip(1).all(|l| l.starts_with("det frame=")));

    // resuming extends the epoch count and keeps the history format
    let more = dir.path().join("m2.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&more), "--resume", s(&ckpt), "--epochs", "1", "--log", s(&log)]);
    assert!(fs::read(&more).unwrap().windows(15).any(|w| w == b"epochs_done: 4\n"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[synth]\ns = 3\nb = 1\nc = 4\nt = 2\nsequences = 2\n[corruption]\nmiss_prob = 0.0\n").unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    ok(&["--config", s(&cfg), "synth", "--out", s(&a)]);
    ok(&["--config", s(&cfg), "synth", "--out", s(&b), "--t", "5"]);
    let header = |p: &Path| String::from_utf8_lossy(&fs::read(p).unwrap()[..80]).into_owned();
    assert!(header(&a).contains("T: 2"), "{}", header(&a));
    assert!(header(&b).contains("T: 5"));

    fs::write(&cfg, "[synth]\nwidth = 3\n").unwrap();
    let out = vidrefine(&["--config", s(&cfg), "synth", "--out", s(&a)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=config_error"));
}

#[test]
fn grid_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (data, other) = (dir.path().join("d.bin"), dir.path().join("o.bin"));
    let ckpt = dir.path().join("m.ckpt");
    small_synth(&data, &[]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--hidden", "4", "--epochs", "1"]);
    ok(&["synth", "--out", s(&other), "--s", "3", "--b", "1", "--c", "5", "--t", "3", "--sequences", "2"]);
    let out = vidrefine(&["eval", "--checkpoint", s(&ckpt), "--data", s(&other)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: kind=config_mismatch"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn missing_files_and_bad_arguments_fail() {
    let out = vidrefine(&["eval", "--checkpoint", "/nonexistent/m.ckpt", "--data", "/nonexistent/d.bin"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=io_error"));

    assert!(!vidrefine(&["frobnicate"]).status.success());
    assert!(!vidrefine(&["synth"]).status.success());
}

#[test]
fn gradcheck_reports_every_component() {
    let out = ok(&["gradcheck", "--instances", "5"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|l| l.starts_with("component=") && l.ends_with("status=ok")));

    let strict = vidrefine(&["gradcheck", "--instances", "1", "--tolerance", "0"]);
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stderr).starts_with("error: kind=gradcheck_failed"));
}
