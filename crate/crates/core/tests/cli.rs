use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json")
}

fn physmorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physmorph"))
        .args(args)
        .env_remove("PHYSMORPH_THREADS")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn run_eval_render_and_targets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = physmorph(&["run", s(&smoke()), "--out-dir", s(&out), "--threads", "2"]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("chamfer"));
    for f in [
        "config.json",
        "training.csv",
        "episodes.csv",
        "evaluation.csv",
        "evaluation.json",
        "checkpoint.pmck",
        "frames/ep0001_color.ppm",
        "frames/ep0001_alpha.pgm",
        "frames/ep0001_depth.pgm",
        "snapshots/ep0001.pmgs",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let training = std::fs::read_to_string(out.join("training.csv")).unwrap();
    let header = training.lines().next().unwrap();
    for col in [
        "episode", "pass", "L_mass", "L_alpha", "L_depth", "L_edge", "L_shrink", "L_total",
    ] {
        assert!(header.split(',').any(|c| c == col), "{col} not in {header}");
    }
    assert_eq!(training.lines().count(), 1 + 2 * 3);

    let snap = out.join("snapshots/ep0001.pmgs");
    let eval_dir = dir.path().join("eval");
    let o = physmorph(&["eval", s(&smoke()), s(&snap), "--out-dir", s(&eval_dir)]);
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["chamfer"].as_f64().unwrap() > 0.0);
    assert!(eval_dir.join("evaluation.csv").is_file());

    let o = physmorph(&["render", s(&smoke()), s(&snap), "--out-dir", s(&eval_dir)]);
    assert_ok(&o);
    assert!(eval_dir.join("ep0001_color.ppm").is_file());

    let o = physmorph(&["targets", s(&smoke()), "--out-dir", s(&eval_dir)]);
    assert_ok(&o);
    for f in [
        "target_alpha.pgm",
        "target_depth.pgm",
        "target_mass_x.pgm",
        "target_mass_y.pgm",
        "target_mass_z.pgm",
    ] {
        assert!(eval_dir.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn gradcheck_passes() {
    let o = physmorph(&["gradcheck", s(&smoke())]);
    assert_ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with("ok")).count(), 4, "{text}");
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert_ok(&physmorph(&[
        "run",
        s(&smoke()),
        "--out-dir",
        s(&full),
        "--episodes",
        "3",
    ]));
    assert_ok(&physmorph(&[
        "run",
        s(&smoke()),
        "--out-dir",
        s(&split),
        "--episodes",
        "1",
    ]));
    assert_ok(&physmorph(&[
        "run",
        s(&smoke()),
        "--out-dir",
        s(&split),
        "--episodes",
        "3",
        "--resume",
    ]));
    for f in [
        "training.csv",
        "episodes.csv",
        "checkpoint.pmck",
        "snapshots/ep0002.pmgs",
        "frames/ep0002_color.ppm",
    ] {
        assert_eq!(
            std::fs::read(full.join(f)).unwrap(),
            std::fs::read(split.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"grid": {"resolution": -1}}"#).unwrap();
    assert_eq!(physmorph(&["run", s(&bad)]).status.code(), Some(2));
    assert_eq!(physmorph(&["run", "/nonexistent/config.json"]).status.code(), Some(2));
    assert_eq!(physmorph(&["frobnicate"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_physmorph"))
        .args(["gradcheck", s(&smoke())])
        .env("PHYSMORPH_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("none.pmgs");
    assert_eq!(
        physmorph(&["eval", s(&smoke()), s(&missing), "--out-dir", s(dir.path())])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(physmorph(&["--help"]).status.code(), Some(0));
}
