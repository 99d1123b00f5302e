use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn homlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_homlab"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn malliavin_check_default_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let status = homlab()
        .args(["malliavin-check", "--quiet", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report = read_json(&out.join("malliavin.json"));
    let hs = report["data"]["summary"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["identity"] == "helffer_sjostrand")
        .unwrap();
    assert!(hs["max_rel_gap"].as_f64().unwrap() < 1e-8);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config_sha256"], report["config_hash"]);
    assert_eq!(manifest["verdict_passed"], true);
}

#[test]
fn bundled_laminate_gives_exact_homogenized_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lam");
    let status = homlab()
        .args(["solve-corrector", "--quiet", "--config"])
        .arg(bundled("laminate.toml"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let abar: Vec<f64> = read_json(&out.join("abar.json"))["data"]["abar_per"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let expected = [2.0 / 3.0, 0.0, 0.0, 0.75];
    for (a, e) in abar.iter().zip(expected) {
        assert!((a - e).abs() < 1e-10, "{abar:?}");
    }
    let sigma_err = read_json(&out.join("abar.json"))["data"]["sigma_divergence_error"].as_f64().unwrap();
    assert!(sigma_err < 1e-8);
    assert!(out.join("phi.bin").exists());
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "command = \"solve-corrector\"\nunexpected = true\n").unwrap();
    let out = dir.path().join("never");
    let status = homlab()
        .args(["solve-corrector", "--quiet", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());

    // Valid TOML that fails validation (guard violation) is also a config error.
    fs::write(
        &config,
        fs::read_to_string(bundled("commutator_scan.toml"))
            .unwrap()
            .replace("side = 256", "side = 64"),
    )
    .unwrap();
    let status = homlab()
        .args(["commutator-scan", "--quiet", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

const SMALL_SCAN: &str = r#"
command = "commutator-scan"

[ensemble]
dim = 2
beta = 1.0
side = 64
epsilons = [0.0625, 0.03125]
samples = 6
seed = 12
map = { family = "bump", lambda = 0.3 }

[[ensemble.test_functions]]
id = "F"
center_offset = [0.0, 0.0]
radius = 0.9
weights = [1.0, 0.0, 0.0, 1.0]
"#;

#[test]
fn rerunning_the_written_config_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scan.toml");
    fs::write(&config, SMALL_SCAN).unwrap();
    let first = dir.path().join("first");
    let status = homlab()
        .args(["commutator-scan", "--quiet", "--workers", "1", "--seed", "77", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&first)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let manifest = read_json(&first.join("manifest.json"));
    assert_eq!(manifest["seed"], 77);

    // The written config records the overrides; a different worker count
    // must not change any artifact.
    let second = dir.path().join("second");
    let status = homlab()
        .args(["commutator-scan", "--quiet", "--workers", "3", "--config"])
        .arg(first.join("config.toml"))
        .arg("--out")
        .arg(&second)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for name in ["report.json", "ensemble.csv"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }
    let csv = fs::read_to_string(first.join("ensemble.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "beta,d,N,epsilon,F_id,sample_index,I_value");
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
}

#[test]
fn wrong_subcommand_for_config_is_rejected() {
    let status = homlab()
        .args(["growth-scan", "--quiet", "--config"])
        .arg(bundled("laminate.toml"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn every_bundled_config_validates() {
    use homlab::cli::ExperimentConfig;
    for entry in fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let config = ExperimentConfig::load(&path).unwrap();
        let command = config.command.expect("bundled configs name their command");
        config.validate(command).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let round = ExperimentConfig::parse(&config.to_toml().unwrap()).unwrap();
        assert_eq!(round, config, "{}", path.display());
    }
}
