use std::path::Path;

use physmorph::config::ExperimentConfig;
use physmorph::scene::Scene;
use physmorph::shape::ShapeSpec;
use physmorph::Error;

fn configs() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_configs_load_and_round_trip() {
    let all = configs();
    assert!(all.len() >= 4);
    for p in all {
        let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back, "{}", p.display());
    }
}

#[test]
fn small_configs_build_scenes() {
    for name in ["smoke.json", "sphere_to_box_desk.json", "sphere_to_heart_desk.json"] {
        let cfg = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)).unwrap();
        let scene = Scene::build(&cfg).unwrap();
        assert_eq!(scene.initial.len(), cfg.anchors, "{name}");
        let m: f64 = scene.target_mass.mass.iter().sum();
        assert!((m - scene.initial.total_mass()).abs() <= 1e-9 * m, "{name}");
    }
}

#[test]
fn empty_text_gives_defaults() {
    assert_eq!(ExperimentConfig::from_json("").unwrap(), ExperimentConfig::default());
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
}

#[test]
fn errors_name_the_offending_key() {
    let key = |text: &str| match ExperimentConfig::from_json(text) {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected a config error, got {other:?}"),
    };
    assert_eq!(key(r#"{"training": {"passes": "three"}}"#), "training.passes");
    assert!(key(r#"{"training": {"bogus": 1}}"#).starts_with("training"));
    assert_eq!(key(r#"{"training": {"gamma": 1.5}}"#), "training.gamma");
    assert_eq!(key(r#"{"anchors": 0}"#), "anchors");
    assert_eq!(key(r#"{"gaussian": {"sv_min": 3.0}}"#), "gaussian.sv_min");
}

#[test]
fn resolution_scale_keeps_dx_and_scales_the_scene() {
    let base = ExperimentConfig::default();
    let half = base.with_resolution_scale(0.5).unwrap();
    assert_eq!(half.grid.dx, base.grid.dx);
    assert_eq!(half.grid.resolution * 2, base.grid.resolution);
    assert_eq!(half.anchors * 8, base.anchors);
    assert!(base.with_resolution_scale(0.0).is_err());
    assert!(base.with_resolution_scale(f64::NAN).is_err());
}

#[test]
fn relative_mesh_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("tet.obj"),
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 3 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n",
    )
    .unwrap();
    let text = r#"{"target": {"kind": "mesh", "path": "tet.obj", "center": [0, 0, 0], "scale": 6.0}}"#;
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(&cfg_path, text).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    match &cfg.target {
        ShapeSpec::Mesh { path, .. } => assert_eq!(path, &dir.path().join("tet.obj")),
        other => panic!("unexpected target {other:?}"),
    }
    assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config { .. })));
}
