use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_shefluct");

fn shefluct(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_COV: &str = r#"
[model]
d = 1
m = 1
family = "bounded-smooth"
a = [1.0]
c = [0.5]
w = [1.0]

[grid]
t_final = 0.2
dt = 0.004
dx = 0.1
padding = 2.0

[experiment]
kind = "covariance"
radii = [0.5, 1.0]
replicas = 24
eta_dt = 0.02
seed = 11
"#;

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn h1_identity_reports_holds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "h1.toml",
        "[model]\nd = 2\nm = 2\nfamily = \"constant\"\ns = [1.0, 0.0, 0.0, 1.0]\n\n[experiment]\nkind = \"h1\"\n",
    );
    let out = dir.path().join("out");
    let o = shefluct(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["results"]["kind"], "h1");
    assert_eq!(report["results"]["holds"], true);
    assert_eq!(report["results"]["rank"], 2);
    let csv = std::fs::read_to_string(out.join("h1_check.csv")).unwrap();
    assert_eq!(csv, "d,m,rank,holds\n2,2,2,1\n");
}

#[test]
fn unstable_grid_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_COV);
    let o = shefluct(&["run", "--config", &cfg, "--override", "grid.dt=0.01"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unstable"), "{}", stderr(&o));
    let o = shefluct(&["validate", "--config", &cfg, "--override", "grid.dt=0.01"]);
    assert_eq!(o.status.code(), Some(2));
    let o = shefluct(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok: covariance"));
    let o = shefluct(&["validate", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn singular_prelimit_covariance_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    // duplicated σ rows: the two components are identical, C^R is singular
    let cfg = write(
        dir.path(),
        "deg.toml",
        r#"
[model]
d = 2
m = 2
family = "constant"
s = [1.0, 0.5, 1.0, 0.5]

[grid]
t_final = 0.2
dt = 0.004
dx = 0.1
padding = 2.0

[experiment]
kind = "malliavin"
radii = [1.0]
replicas = 4
eta_dt = 0.02
"#,
    );
    let o = shefluct(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("singular matrix C^R"), "{}", stderr(&o));
}

fn tables(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_are_byte_identical_and_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_COV);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(shefluct(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(shefluct(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "3"]).status.success());
    let ta = tables(&a);
    assert_eq!(ta.len(), 5);
    assert!(ta.iter().any(|(n, _)| n == "covariance_entries.csv"));
    assert_eq!(ta, tables(&b));
    let header = String::from_utf8(ta.iter().find(|(n, _)| n == "covariance_eta.csv").unwrap().1.clone()).unwrap();
    assert!(header.starts_with("r,k,i,j,value,se\n"));
}

#[test]
fn merged_halves_equal_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_COV);
    let full = dir.path().join("full");
    let h1 = dir.path().join("h1");
    let h2 = dir.path().join("h2");
    let merged = dir.path().join("merged");
    assert!(shefluct(&["run", "--config", &cfg, "--out", full.to_str().unwrap()]).status.success());
    assert!(shefluct(&["run", "--config", &cfg, "--out", h1.to_str().unwrap(), "--replicas", "12"]).status.success());
    let o = shefluct(&[
        "run",
        "--config",
        &cfg,
        "--out",
        h2.to_str().unwrap(),
        "--replicas",
        "12",
        "--override",
        "experiment.replica_offset=12",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = shefluct(&["merge", h2.to_str().unwrap(), h1.to_str().unwrap(), "--out", merged.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tables(&full), tables(&merged));
    let read = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(d.join("replicas.json")).unwrap()).unwrap()
    };
    let (f, m) = (read(&full), read(&merged));
    for key in ["config_hash", "plan", "records"] {
        assert_eq!(f[key], m[key], "{key}");
    }
    assert_eq!(m["config"]["experiment"]["replicas"], 24);
}

#[test]
fn merge_refuses_mismatched_or_overlapping_batches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_COV);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(shefluct(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--replicas", "4"]).status.success());
    assert!(shefluct(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--replicas", "4", "--seed", "12"])
        .status
        .success());
    let o = shefluct(&["merge", a.to_str().unwrap(), b.to_str().unwrap(), "--out", dir.path().join("m").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
    let o = shefluct(&["merge", a.to_str().unwrap(), a.to_str().unwrap(), "--out", dir.path().join("m").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = shefluct(&["merge", "--out", dir.path().join("m").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
