//! End-to-end checks of the `scm` binary: synth, run, report, lisa, moran,
//! environment overrides, failure isolation and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn scm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scm"));
    // Tests control parallelism and output paths explicitly.
    c.env_remove("SCM_OUT_DIR").env_remove("SCM_JOBS");
    c
}

fn ok(output: &Output) -> &Output {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

const DATASET_TOML: &str = r#"
master_seed = 42
folds = 2
models = ["net-a", "net-b"]
test_fraction = 0.5

[grid]
rows = 9
cols = 9
hole_fraction = 0.05

[features]
k = 8
p = 3
beta = [1.0, -0.5, 0.8]
noise_sigma = 1.0

[[groups]]
label = "tumor"
count = 2
signal = { kind = "targets", rho = 0.6 }

[[groups]]
label = "normal"
count = 2
signal = { kind = "none" }
"#;

fn write_spec(dir: &Path) -> PathBuf {
    let path = dir.join("dataset.toml");
    std::fs::write(&path, DATASET_TOML).unwrap();
    path
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let spec = write_spec(dir);
    let data = dir.join("data");
    let mut cmd = scm();
    cmd.args(["synth", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .args(extra);
    ok(&cmd.output().unwrap());
    data.join("manifest.csv")
}

fn run(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut cmd = scm();
    cmd.args(["run", "--dataset"])
        .arg(manifest)
        .arg("--out")
        .arg(out)
        .args(["--k", "8,24", "--permutations", "99", "--seed", "7"])
        .args(extra);
    cmd.output().unwrap()
}

#[test]
fn synth_run_report_round_trip() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), &[]);
    let text = std::fs::read_to_string(&manifest).unwrap();
    // 4 images x 2 models, plus the header.
    assert_eq!(text.lines().count(), 9);

    let out = dir.path().join("run");
    ok(&run(&manifest, &out, &[]));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    // 8 rows x 2 folds x 2 k values, plus the header.
    assert_eq!(results.lines().count(), 33);
    assert!(results
        .lines()
        .next()
        .unwrap()
        .starts_with("image_id,model_id,fold,k,skipped,moran_i,moran_p,r2_ols"));

    let rep = dir.path().join("rep");
    let mut cmd = scm();
    cmd.args(["report", "--results"])
        .arg(out.join("results.csv"))
        .arg("--dataset")
        .arg(&manifest)
        .arg("--out")
        .arg(&rep)
        .args([
            "--lisa-image",
            "tumor-000",
            "--lisa-model",
            "net-a",
            "--permutations",
            "99",
        ]);
    ok(&cmd.output().unwrap());
    for file in [
        "aggregates.csv",
        "ksweep.csv",
        "ranking_targets.csv",
        "wilcoxon_targets.csv",
        "most_spatial_targets.csv",
        "train_test.csv",
        "correlations.csv",
        "lisa_tumor-000_f0_k8.csv",
        "summary.json",
    ] {
        assert!(rep.join(file).is_file(), "missing {file}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_rows"], 32);
    let ranked = summary["rankings"]["targets"]["models"].as_array().unwrap();
    assert_eq!(ranked.len(), 2);
    for img in summary["most_spatial"]["images"].as_array().unwrap() {
        assert!(img["image_id"].as_str().unwrap().starts_with("tumor-"));
    }
}

#[test]
fn binary_features_load_and_run() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), &["--binary"]);
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("features.bin"));
    let out = dir.path().join("run");
    ok(&run(&manifest, &out, &[]));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 33);
}

#[test]
fn env_variables_supply_out_dir_and_jobs() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), &[]);
    let out = dir.path().join("from-env");
    let mut cmd = scm();
    cmd.args(["run", "--dataset"])
        .arg(&manifest)
        .args(["--k", "8", "--permutations", "99"])
        .env("SCM_OUT_DIR", &out)
        .env("SCM_JOBS", "1");
    ok(&cmd.output().unwrap());
    assert!(out.join("results.csv").is_file());
}

#[test]
fn one_broken_image_does_not_block_the_rest() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), &[]);
    let victim = dir.path().join("data/images/tumor-001/net-b/features.csv");
    std::fs::write(&victim, "f0,f1,f2\n1.0,2.0,nan\n").unwrap();

    let out = dir.path().join("run");
    let output = run(&manifest, &out, &[]);
    assert!(
        output.status.success(),
        "per-image failures must not be fatal"
    );
    let failures = std::fs::read_to_string(out.join("failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 2);
    assert!(failures.contains("tumor-001") && failures.contains("non-finite"));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    // One of the 8 (image, model) rows lost: 7 x 2 folds x 2 k, plus header.
    assert_eq!(results.lines().count(), 29);
    assert!(!results.contains("tumor-001,net-b"));
    assert!(results.contains("tumor-001,net-a"));
}

#[test]
fn exit_codes_distinguish_config_from_schema() {
    let dir = TempDir::new().unwrap();
    // Missing manifest: configuration problem.
    let out = scm()
        .args(["run", "--dataset"])
        .arg(dir.path().join("missing.csv"))
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Malformed manifest: schema problem.
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "image_id,model_id\nx,y\n").unwrap();
    let out = scm()
        .args(["run", "--dataset"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Bad flag value: configuration problem, not clap's default exit 2.
    let out = scm()
        .args(["run", "--dataset"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("z"))
        .args(["--gamma", "not-a-number"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = scm().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn moran_subcommand_is_deterministic_json() {
    let dir = TempDir::new().unwrap();
    let coords = dir.path().join("coords.csv");
    let values = dir.path().join("values.csv");
    let mut ctext = String::from("row,col\n");
    let mut vtext = String::from("value\n");
    for r in 0..6u32 {
        for c in 0..6u32 {
            ctext.push_str(&format!("{r},{c}\n"));
            // Smooth gradient: strongly positive autocorrelation.
            vtext.push_str(&format!("{}\n", r as f64 + 0.5 * c as f64));
        }
    }
    std::fs::write(&coords, ctext).unwrap();
    std::fs::write(&values, vtext).unwrap();
    let run_once = || {
        let mut cmd = scm();
        cmd.args(["moran", "--coords"])
            .arg(&coords)
            .arg("--values")
            .arg(&values)
            .args(["--k", "8", "--permutations", "999", "--seed", "11"]);
        let out = cmd.output().unwrap();
        String::from_utf8(ok(&out).stdout.clone()).unwrap()
    };
    let a = run_once();
    assert_eq!(a, run_once());
    let parsed: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(parsed["i_statistic"].as_f64().unwrap() > 0.5);
    assert_eq!(parsed["pseudo_p"].as_f64().unwrap(), 0.001);
    assert_eq!(parsed["n_permutations"], 999);
}

#[test]
fn lisa_subcommand_labels_match_significance() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), &[]);
    let out_file = dir.path().join("lisa.csv");
    let mut cmd = scm();
    cmd.args(["lisa", "--dataset"])
        .arg(&manifest)
        .args([
            "--image",
            "tumor-000",
            "--model",
            "net-a",
            "--permutations",
            "99",
            "--alpha",
            "0.05",
        ])
        .arg("--out")
        .arg(&out_file);
    ok(&cmd.output().unwrap());
    let text = std::fs::read_to_string(&out_file).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "row,col,attention,attention_quantile,residual,local_i,quadrant,p_local,label"
    );
    let mut n = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let quantile: u8 = fields[3].parse().unwrap();
        assert!((1..=5).contains(&quantile));
        let p: f64 = fields[7].parse().unwrap();
        let label = fields[8];
        assert_eq!(label == "ns", p > 0.05, "line {line}");
        if label != "ns" {
            assert_eq!(label, fields[6], "significant label equals the quadrant");
        }
        n += 1;
    }
    // 9x9 grid with 5% holes.
    assert_eq!(n, 77);
}
