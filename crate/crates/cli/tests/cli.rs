use std::path::Path;
use std::process::{Command, Output};

fn dseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dseg"))
        .args(args)
        .output()
        .expect("spawn dseg")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// A `w`×`h` P6 image with a bright disc on a dark gradient.
fn write_ppm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - w as f64 / 2.0, y as f64 - h as f64 / 2.0);
            let inside = dx * dx + dy * dy < (w.min(h) as f64 / 4.0).powi(2);
            let v = if inside { 220 } else { (x * 60 / w) as u8 };
            bytes.extend_from_slice(&[v, v / 2, v / 3]);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn train_run(data: &Path, out: &Path) {
    ok(dseg(&[
        "train",
        "--data",
        arg(data),
        "--preset",
        "desk",
        "--epochs",
        "1",
        "--out",
        arg(out),
    ]));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(dseg(&["--help"]).status.code(), Some(0));
    assert_eq!(dseg(&["--version"]).status.code(), Some(0));
    assert_eq!(dseg(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    for args in [&["--bogus"][..], &["profile", "--preset", "huge", "--no-fps"], &["profile", "--input", "64by64"]] {
        let o = dseg(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("dseg: error[usage]: "), "{err}");
    }
}

#[test]
fn runtime_errors_exit_two_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    write_ppm(&img, 64, 64);
    let missing = dir.path().join("nope.dsgw");
    let o = dseg(&["infer", "--weights", arg(&missing), "--image", arg(&img), "--mask-out", "m.pgm"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("dseg: error[") && err.contains("nope.dsgw"), "{err}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, "count = 4\ncolour = red\n").unwrap();
    let o = dseg(&["synth-data", "--config", arg(&cfg), "--out", arg(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn profile_prints_paper_params_and_macs() {
    let o = ok(dseg(&["profile", "--preset", "paper", "--input", "256x256", "--no-fps"]));
    let out = stdout(&o);
    assert!(out.contains("params: 18.457 M (18456685)"), "{out}");
    assert!(out.contains("macs: 28.348 GMac"), "{out}");
}

#[test]
fn gradcheck_passes() {
    let o = ok(dseg(&["gradcheck"]));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 30);
    assert!(!out.contains("FAIL"));
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(dseg(&["synth-data", "--out", arg(&data), "--count", "24", "--seed", "3"]));
    assert!(data.join("manifest.txt").exists() && data.join("resolved.cfg").exists());
    ok(dseg(&["split", "--manifest", arg(&data.join("manifest.txt")), "--ratios", "70:15:15", "--seed", "1"]));
    let lines = |f: &str| String::from_utf8(read(data.join(f))).unwrap().lines().count();
    assert_eq!((lines("train.txt"), lines("val.txt"), lines("test.txt")), (16, 3, 5));

    let (a, b) = (root.join("run_a"), root.join("run_b"));
    train_run(&data, &a);
    train_run(&data, &b);
    for f in ["resolved.cfg", "best.dsgw", "history.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    let cfg = String::from_utf8(read(a.join("resolved.cfg"))).unwrap();
    assert!(cfg.contains("max_epochs = 1") && cfg.contains("preset = desk"), "{cfg}");

    let weights = a.join("best.dsgw");
    let report = root.join("report.csv");
    ok(dseg(&["eval", "--weights", arg(&weights), "--data", arg(&data), "--report", arg(&report)]));
    let csv = String::from_utf8(read(&report)).unwrap();
    assert!(csv.starts_with("id,dsc,miou,recall,precision,f2\n"), "{csv}");
    assert_eq!(csv.lines().filter(|l| l.starts_with("synth_")).count(), 5, "{csv}");
    assert!(csv.lines().any(|l| l.starts_with("mean,")), "{csv}");

    let img = root.join("big.ppm");
    write_ppm(&img, 256, 256);
    let mask = root.join("big.pgm");
    ok(dseg(&["infer", "--weights", arg(&weights), "--image", arg(&img), "--mask-out", arg(&mask)]));
    let bytes = read(&mask);
    let header = b"P5\n256 256\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 256 * 256);
    assert!(bytes[header.len()..].iter().all(|&v| v == 0 || v == 255));

    let (h1, h2) = (root.join("heat1"), root.join("heat2"));
    for out in [&h1, &h2] {
        ok(dseg(&["heatmap", "--weights", arg(&weights), "--image", arg(&img), "--out-dir", arg(out)]));
    }
    for f in ["big_heat.ppm", "big_overlay.ppm"] {
        let one = read(h1.join(f));
        assert!(one.starts_with(b"P6\n256 256\n255\n"));
        assert_eq!(one, read(h2.join(f)), "{f} differs");
    }
}
