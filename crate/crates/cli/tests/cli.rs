use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Output};

fn dislocore(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dislocore")).arg("--out").arg(out).args(args).output().expect("binary runs")
}

const TOY_SCREW: [&str; 14] = [
    "--crystal",
    "toy-square",
    "--potential",
    "toy",
    "--burgers",
    "0,0,2",
    "--line",
    "0,0,1",
    "--mode",
    "isotropic",
    "--mu",
    "1",
    "--nu",
    "0.3",
];

#[test]
fn silicon_is_certified_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dislocore(dir.path(), &["stability"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cert = std::fs::read_to_string(dir.path().join("stability.toml")).unwrap();
    assert!(cert.contains("min_normalized"));
}

#[test]
fn unstable_potential_is_a_scientific_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dislocore(dir.path(), &["--crystal", "toy-square", "--potential", "toy-flipped", "stability"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.toml");
    let out = dislocore(dir.path(), &["--crystal", missing.to_str().unwrap(), "stability"]);
    assert_eq!(out.status.code(), Some(64));
    assert_eq!(dislocore(dir.path(), &["transmogrify"]).status.code(), Some(64));
    assert_eq!(dislocore(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn predictions_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TOY_SCREW.to_vec();
    args.extend(["predict", "--radius", "12"]);
    let a = dislocore(&dir.path().join("a"), &args);
    let b = dislocore(&dir.path().join("b"), &args);
    assert!(a.status.success() && b.status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("predict.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn isotropic_screw_predictor_is_the_angular_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TOY_SCREW.to_vec();
    args.extend(["predict", "--radius", "12"]);
    let out = dislocore(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("predict.csv")).unwrap();
    let core: Vec<f64> =
        text.lines().find_map(|l| l.strip_prefix("# core=")).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("l1")) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let theta = (v[1] - core[1]).atan2(v[0] - core[0]).rem_euclid(2.0 * PI);
        let expected = 2.0 * theta / (2.0 * PI);
        assert!((v[4] - expected).abs() <= 1e-8, "at ({}, {}): {} vs {expected}", v[0], v[1], v[4]);
        assert_eq!((v[2], v[3]), (0.0, 0.0));
        rows += 1;
    }
    assert!(rows > 400);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "crystal = \"toy-square\"\npotential = \"toy-flipped\"\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let flipped = dislocore(dir.path(), &["--config", cfg, "stability", "--grid", "8"]);
    assert_eq!(flipped.status.code(), Some(2));
    let fixed = dislocore(dir.path(), &["--config", cfg, "--potential", "toy", "stability", "--grid", "8"]);
    assert_eq!(fixed.status.code(), Some(0), "{}", String::from_utf8_lossy(&fixed.stderr));
    std::fs::write(dir.path().join("bad.toml"), "colour = 3\n").unwrap();
    let bad = dislocore(dir.path(), &["--config", dir.path().join("bad.toml").to_str().unwrap(), "stability"]);
    assert_eq!(bad.status.code(), Some(64));
}

#[test]
fn green_writes_one_row_per_offset_and_block() {
    let dir = tempfile::tempdir().unwrap();
    let out = dislocore(
        dir.path(),
        &["--crystal", "toy-square", "--potential", "toy", "green", "--supercell", "16", "--window", "2,8"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("green.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("r,block,value"));
    assert_eq!(lines.count(), 3 * 16 * 16);
}
