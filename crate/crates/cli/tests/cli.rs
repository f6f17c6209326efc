use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCALAR: &str = r#"
algorithm = "deed-gd"
[problem]
seed = 7
d = 1
N = 1
kappa = 1.0
rows_per_node = 1
noise = 0.0
[quant]
s = 1.0
c_prime = 0.5
[run]
T = 30
"#;

fn deedsim(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_deedsim"));
    cmd.args(args).env_remove("DEEDSIM_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("DEEDSIM_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn scalar_run_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "scalar.toml", SCALAR);
    let mut contents = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let res = deedsim(&["run", &cfg, "--out", out.to_str().unwrap()], None);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["deed-gd.bound.csv", "deed-gd.summary.json", "deed-gd.trace.csv"]);
        contents.push(files.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(contents[0], contents[1]);
    let header = String::from_utf8(contents[0][2].clone()).unwrap();
    assert!(header.starts_with("t,dist,fgap,bits_up,bits_down,cum_bits,budget\n"));
}

#[test]
fn env_var_sets_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "scalar.toml", SCALAR);
    let out = tmp.path().join("env");
    let res = deedsim(&["bound", &cfg], Some(&out));
    assert!(res.status.success());
    assert!(out.join("deed-gd.bound.csv").exists());
}

#[test]
fn invalid_config_names_the_inequality() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &SCALAR.replace("c_prime = 0.5", "c_prime = 1.5"));
    let res = deedsim(&["run", &cfg], Some(tmp.path()));
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("c < c' < 1"));
}

#[test]
fn usage_errors() {
    assert_eq!(deedsim(&["verify", "everything"], None).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "scalar.toml", SCALAR);
    assert_eq!(deedsim(&["compare", &cfg], None).status.code(), Some(2));
}

#[test]
fn verify_reports_json() {
    let res = deedsim(&["verify", "bounds", "--json"], None);
    assert!(res.status.success());
    let reports: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(reports[0]["id"], 2);
    assert_eq!(reports[0]["passed"], true);
}

#[test]
fn compare_tabulates_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let gd = SCALAR.replace("\"deed-gd\"", "\"gd\"");
    let deed = SCALAR.replace("[run]", "[expect]\nthreshold = 1e-6\nfewer_bits_than = [\"gd\"]\n[run]");
    let a = write(tmp.path(), "deed.toml", &deed);
    let b = write(tmp.path(), "gd.toml", &gd);
    // exact GD on the scalar problem converges in one step
    let res = deedsim(&["compare", &a, &b], Some(tmp.path()));
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stdout).contains("FAIL deed-gd reaches"));
    let table = fs::read_to_string(tmp.path().join("compare.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}
