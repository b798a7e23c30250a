use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cylwave::experiment::{run, write_bundle, ExperimentConfig};

const SPECTRAL: &str = r#"{
    "name": "determinism",
    "cross_section": { "kind": "circle", "circumference": 6.283185307179586 },
    "sigma_max": 1.5,
    "potential": { "kind": "square_well", "depth": 1.0, "radius": 1.0 },
    "bc": "neumann",
    "data": {
        "f1": [{ "radial": { "shape": "gaussian", "center": 2.5, "width": 0.25 }, "angular": { "kind": "modes", "modes": [1] } }]
    },
    "grid": { "h": 0.01, "r_max": 6.0 },
    "observation": { "radii": [0.0, 1.0, 2.0] },
    "times": { "start": 10.0, "stop": 40.0, "per_decade": 8 },
    "checks": [{ "check": "two-term-remainder", "max_slope": -0.5, "envelope_samples": 4 }]
}"#;

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.insert(
                path.strip_prefix(dir).unwrap_or(&path).to_path_buf(),
                fs::read(&path).unwrap(),
            );
        }
    }
    out
}

fn bundle(cfg: &ExperimentConfig, threads: usize, tag: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let result = pool.install(|| run(cfg)).unwrap();
    let dir = std::env::temp_dir().join(format!("cylwave-det-{}-{tag}-{threads}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    write_bundle(&result, &dir).unwrap();
    let out = files(&dir);
    fs::remove_dir_all(&dir).unwrap();
    out
}

fn assert_identical(cfg: &ExperimentConfig, tag: &str) {
    let a = bundle(cfg, 1, tag);
    let b = bundle(cfg, 3, tag);
    assert!(a.keys().any(|p| p.extension().is_some_and(|e| e == "csv")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{tag}: {} differs between runs", path.display());
    }
}

#[test]
fn free_run_is_byte_identical_across_thread_counts() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/free_neumann_circle.json");
    assert_identical(&ExperimentConfig::load(&path).unwrap(), "free");
}

#[test]
fn spectral_run_is_byte_identical_across_thread_counts() {
    assert_identical(&ExperimentConfig::from_json(SPECTRAL).unwrap(), "spectral");
}
