//! The bundled suite under `fixtures/suite` must match the generator byte for
//! byte. Set `WORKZONE_BLESS=1` to rewrite it after changing the generator.

use std::path::PathBuf;

use workzone_core::pipeline::{load_scenes, RunConfig};
use workzone_core::suite::{suite_files, synthetic_suite, write_suite};

fn suite_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/suite")
}

#[test]
fn committed_suite_matches_generator() {
    let dir = suite_dir();
    if std::env::var_os("WORKZONE_BLESS").is_some() {
        write_suite(&dir).unwrap();
    }
    for (name, bytes) in suite_files() {
        let on_disk = std::fs::read(dir.join(&name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(on_disk == bytes, "{name} is stale; rerun with WORKZONE_BLESS=1");
    }
}

#[test]
fn committed_suite_loads_like_the_generator() {
    let dir = suite_dir();
    let cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
    let suite = synthetic_suite();
    let build = load_scenes(cfg.paths.scenes.as_ref().unwrap(), &cfg.ego).unwrap();
    let infer = load_scenes(cfg.paths.infer_scenes.as_ref().unwrap(), &cfg.ego).unwrap();
    assert_eq!(build.len(), suite.build.len());
    assert_eq!(infer.len(), suite.infer.len());
    for (a, b) in build.iter().chain(&infer).zip(suite.build.iter().chain(&suite.infer)) {
        assert_eq!(a.spec, b.spec);
        assert!(a.mask == b.mask, "{} mask differs", a.spec.frame_id);
    }
    assert_eq!(cfg.ego, suite.config.ego);
}
