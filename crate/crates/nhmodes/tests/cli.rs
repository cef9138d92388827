use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_nhmodes");

fn config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("scenario.toml");
    let text = format!(
        r#"
[resonator]
kind = "half_symmetric_stable"
cavity_length = 0.1
wavelength = 1e-6
curvature_radius = 0.3

[grid]
nx = 128
dx = 3.3152e-5
guard_fraction = 0.0

[solve]
count = 3
method = "dense"
{extra}
"#
    );
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn petermann_subcommand_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    let st = Command::new(BIN)
        .args(["petermann", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    for f in ["report.json", "petermann.csv", "c_matrix.csv", "d_matrix.csv", "modes/manifest.json", "resolved.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("petermann.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let again = dir.path().join("again");
    let st = Command::new(BIN)
        .args(["export", "--format", "csv", "--report"])
        .arg(out.join("report.json"))
        .arg("--out")
        .arg(&again)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(std::fs::read(again.join("c_matrix.csv")).unwrap(), std::fs::read(out.join("c_matrix.csv")).unwrap());
}

#[test]
fn unknown_key_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "bogus = 1");
    let st = Command::new(BIN).args(["modes", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("bogus"));
}

#[test]
fn bad_stage_name_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let st = Command::new(BIN).args(["run", "--stages", "modes,nope", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn failed_stage_gives_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\n[decay]\nsynthetic = true\npetermann = [1.0]\nN_modes = 201\ndt = 10.0\n");
    let out = dir.path().join("out");
    let st = Command::new(BIN).args(["decay", "--seed", "3", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("\"seed\": 3"));
    assert!(report.contains("\"status\": \"failed\""));
}
