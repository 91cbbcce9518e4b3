use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use torus_games::particle_sim::{InitialCondition, SimConfig};
use torus_games::{GameMatrix, Kernel, TorusGeom, UpdateRule};
use torus_harness::{ExperimentSpec, HarnessError};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_torus-games"))
}

fn spec_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("specs")
        .join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

#[test]
fn experiment_outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = spec_file("walk_mixing");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = run(&[
            "walk_mixing",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--reps",
            "2e4",
        ]);
        assert!(o.status.code().is_some_and(|c| c <= 1), "{o:?}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("tv_bias_adjusted"));
        outputs.push(out);
    }
    let mut csvs: Vec<_> = fs::read_dir(&outputs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    csvs.sort();
    assert!(!csvs.is_empty());
    for f in csvs
        .iter()
        .map(|f| f.to_owned())
        .chain(["summary.json".into()])
    {
        assert_eq!(
            fs::read(outputs[0].join(&f)).unwrap(),
            fs::read(outputs[1].join(&f)).unwrap(),
            "{f:?} differs between runs"
        );
    }
    let m: Value =
        serde_json::from_str(&fs::read_to_string(outputs[0].join("manifest.json")).unwrap())
            .unwrap();
    let m2: Value =
        serde_json::from_str(&fs::read_to_string(outputs[1].join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["config_hash"], m2["config_hash"]);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["seed"], 20261014);
}

#[test]
fn seed_override_changes_hash_and_results() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = spec_file("census_decay");
    let mut hashes = Vec::new();
    for seed in ["1", "2"] {
        let out = tmp.path().join(seed);
        let o = run(&[
            "census_decay",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--reps",
            "3",
            "--seed",
            seed,
        ]);
        assert!(o.status.code().is_some_and(|c| c <= 1), "{o:?}");
        let m: Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        hashes.push(m["config_hash"].clone());
        let s: Value =
            serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(s["schema_version"], 1);
        assert_eq!(s["replicates"], 3);
        assert_eq!(s["seed"], seed.parse::<u64>().unwrap());
    }
    assert_ne!(hashes[0], hashes[1]);
}

#[test]
fn regime_violation_is_an_error() {
    let mut spec: Value =
        serde_json::from_str(&fs::read_to_string(spec_file("regime2_convergence")).unwrap())
            .unwrap();
    spec["parameters"]["w_exponent"] = json!(3.2);
    let parsed: ExperimentSpec = serde_json::from_value(spec.clone()).unwrap();
    assert!(matches!(
        torus_harness::run(&parsed),
        Err(HarnessError::RegimeViolation { d: 3, .. })
    ));
    spec["parameters"]["w_exponent"] = json!(2.0);
    let parsed: ExperimentSpec = serde_json::from_value(spec.clone()).unwrap();
    assert!(torus_harness::run(&parsed).is_err());

    let tmp = tempfile::tempdir().unwrap();
    let path = write_json(tmp.path(), "bad.json", &spec);
    let o = run(&[
        "regime2_convergence",
        "--spec",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("regime-2"));
}

#[test]
fn unknown_parameter_fields_are_rejected() {
    let mut spec: Value =
        serde_json::from_str(&fs::read_to_string(spec_file("walk_mixing")).unwrap()).unwrap();
    spec["parameters"]["tv_limit"] = json!(0.1);
    let parsed: ExperimentSpec = serde_json::from_value(spec).unwrap();
    let err = torus_harness::run(&parsed).unwrap_err();
    assert!(matches!(err, HarnessError::InvalidParameters { .. }));
    assert!(err.to_string().contains("tv_limit"));
}

#[test]
fn spec_kind_must_match_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "census_decay",
        "--spec",
        spec_file("walk_mixing").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_thresholds_are_rejected() {
    let mut spec: Value =
        serde_json::from_str(&fs::read_to_string(spec_file("walk_mixing")).unwrap()).unwrap();
    spec["parameters"]
        .as_object_mut()
        .unwrap()
        .remove("thresholds");
    let parsed: ExperimentSpec = serde_json::from_value(spec).unwrap();
    assert!(torus_harness::run(&parsed).is_err());
}

#[test]
fn simulate_writes_trajectories_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SimConfig {
        id: "cli-sim".into(),
        geometry: TorusGeom::new(6, 3).unwrap(),
        kernel: Kernel::nearest_neighbor(3).unwrap(),
        game: GameMatrix::from_rows(vec![
            vec![0.0, 1.0, -1.0],
            vec![-1.0, 0.0, 1.0],
            vec![1.0, -1.0, 0.0],
        ])
        .unwrap(),
        rule: UpdateRule::DeathBirth,
        w: 0.1,
        mu: 0.05,
        t_end: 2.0,
        record_times: vec![0.5, 1.0, 1.5],
        seed: 17,
        initial: InitialCondition::Product {
            densities: vec![0.5, 0.3, 0.2],
        },
    };
    let path = write_json(
        tmp.path(),
        "config.json",
        &serde_json::to_value(&config).unwrap(),
    );
    let out = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--reps",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let mut reader = csv::Reader::from_path(out.join("trajectories.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["time", "U_1", "U_2", "U_3", "replicate", "seed"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert!(rows.len() >= 3 * 3);
    for r in &rows {
        let s: f64 = (1..=3).map(|k| r[k].parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let m: Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_id"], "cli-sim");
    assert_eq!(m["replicate_seeds"].as_array().unwrap().len(), 3);
}

#[test]
fn coalesce_prints_estimates() {
    let o = run(&[
        "coalesce",
        "--d",
        "3",
        "--horizon",
        "200",
        "--reps",
        "2000",
        "--seed",
        "5",
        "--rule",
        "bd",
    ]);
    assert!(o.status.success(), "{o:?}");
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    let text = doc.to_string();
    assert!(text.contains("p(0|v1)"));
    assert_eq!(doc["estimates"][0]["replicates"], 2000);
    assert!((doc["kappa"].as_f64().unwrap() - 6.0).abs() < 1e-9);
}

#[test]
fn invalid_simulation_config_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_json(tmp.path(), "config.json", &json!({"id": "x"}));
    let o = run(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
