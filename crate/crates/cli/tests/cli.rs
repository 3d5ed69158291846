use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn spde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spde"))
        .args(args)
        .env_remove("SPDE_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spde(args);
    assert!(
        out.status.success(),
        "spde {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The small scenario, shrunk further for quick end-to-end runs.
fn tiny_scenario(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(configs().join("small_scenario.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["datasets"] = 1.into();
    v["replicates"] = serde_json::json!([1, 2]);
    v["stations"] = 40.into();
    v["domain"] = serde_json::json!({"x_min": 0.0, "y_min": 0.0, "x_max": 200.0, "y_max": 250.0});
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn prior_solve_defaults_reproduce_reference_values() {
    let out = ok(&["prior", "solve"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let c = &v["cases"][0];
    let close = |key: &str, want: f64| {
        let got = c[key].as_f64().unwrap();
        assert!((got - want).abs() <= 0.01, "{key}: {got} vs {want}");
    };
    close("mu_kappa", -3.97);
    close("sigma2_kappa", 0.88);
    close("mu_tau", 4.31);
    close("sigma2_tau", 2.35);
    close("sigma2_tau_h", 3.09);
    close("sigma2_kappa_h", 3.09);
    assert_eq!(v["manifest"]["schema_version"], 1);
}

#[test]
fn prior_solve_batch_reproduces_sensitivity_table() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&[
        "prior",
        "solve",
        "--prior",
        s(&configs().join("prior_sensitivity.json")),
        "--out",
        s(tmp.path()),
    ]);
    let v: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("priors.json")).unwrap()).unwrap();
    let table = [
        ("NS-1", 0.99, 0.93),
        ("NS-2", 3.09, 3.09),
        ("NS-3", 7.88, 7.94),
        ("NS-4", 1.24, 3.09),
        ("NS-5", 6.97, 3.09),
        ("NS-6", 15.95, 16.15),
    ];
    let cases = v["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 6);
    for (case, (label, tau_h, kappa_h)) in cases.iter().zip(table) {
        assert_eq!(case["label"], label);
        assert!(
            (case["sigma2_tau_h"].as_f64().unwrap() - tau_h).abs() <= 0.01,
            "{label}"
        );
        assert!(
            (case["sigma2_kappa_h"].as_f64().unwrap() - kappa_h).abs() <= 0.01,
            "{label}"
        );
        assert!(tmp.path().join(format!("prior_{label}.json")).exists());
    }
}

#[test]
fn elicitation_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"targets": {"rho_median": 150, "rho_q": 500, "sigma_median": 0.2, "sigma_q": 2, "q_level": 0.9},
            "coherence": {"h0": 0.4, "c_rho": 1.3, "c_sigma": 0.8}}"#,
    )
    .unwrap();
    let out = spde(&["prior", "solve", "--prior", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c_sigma > c_rho"));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--scenario", s(&sc), "--out", s(&a), "--jobs", "1"]);
    ok(&["simulate", "--scenario", s(&sc), "--out", s(&b), "--jobs", "4"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let c = tmp.path().join("c");
    ok(&["simulate", "--scenario", s(&sc), "--seed", "5", "--out", s(&c)]);
    assert_ne!(
        fs::read(a.join("observations_000.csv")).unwrap(),
        fs::read(c.join("observations_000.csv")).unwrap()
    );
}

#[test]
fn fit_predict_round_trip_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(tmp.path());
    let data = tmp.path().join("data");
    ok(&["simulate", "--scenario", s(&sc), "--out", s(&data)]);
    let mesh = data.join("mesh.json");
    let obs = data.join("observations_000.csv");
    let (f1, f2) = (tmp.path().join("f1"), tmp.path().join("f2"));
    for (dir, jobs) in [(&f1, "1"), (&f2, "3")] {
        ok(&[
            "fit",
            "--mesh",
            s(&mesh),
            "--obs",
            s(&obs),
            "--mode",
            "stationary",
            "--seed",
            "3",
            "--jobs",
            jobs,
            "--out",
            s(dir),
        ]);
    }
    assert_eq!(dir_bytes(&f1), dir_bytes(&f2));

    let summary: Value = serde_json::from_str(&fs::read_to_string(f1.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["schema_version"], 1);
    assert_eq!(summary["manifest"]["seed"], 3);
    assert!(summary["dic"]["dic"].as_f64().unwrap().is_finite());
    let names: Vec<&str> = summary["summary"]["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    for want in [
        "theta_tau",
        "theta_kappa",
        "log_tau_eps",
        "tau_eps",
        "beta_1",
        "beta_2",
        "beta_0",
        "beta_h",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    let fitted = fs::read_to_string(f1.join("fitted.csv")).unwrap();
    assert!(fitted.starts_with("# spde"));
    assert_eq!(fitted.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 40);

    let at = tmp.path().join("at.csv");
    fs::write(&at, "x_km,y_km,elevation_km,year\n50,60,0.2,1\n120,200,0.9,2\n").unwrap();
    let p = tmp.path().join("p");
    ok(&[
        "predict",
        "--mesh",
        s(&mesh),
        "--obs",
        s(&obs),
        "--mode",
        "stationary",
        "--fit",
        s(&f1.join("hyperposterior.json")),
        "--at",
        s(&at),
        "--out",
        s(&p),
    ]);
    let pred = fs::read_to_string(p.join("predictions.csv")).unwrap();
    let rows: Vec<&str> = pred.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "x_km,y_km,elevation_km,year,mean,sd_eta,sd_y");
    assert_eq!(rows.len(), 3);

    let wrong = spde(&[
        "predict",
        "--mesh",
        s(&mesh),
        "--obs",
        s(&obs),
        "--fit",
        s(&f1.join("hyperposterior.json")),
        "--out",
        s(&p),
    ]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn cv_on_three_station_toy() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(tmp.path());
    let data = tmp.path().join("data");
    ok(&["simulate", "--scenario", s(&sc), "--out", s(&data)]);
    let obs = tmp.path().join("toy.csv");
    fs::write(
        &obs,
        "# three stations\nstation_id,x_km,y_km,elevation_km,year,value_m\n\
         A,40,50,0.1,2001,0.9\nA,40,50,0.1,2002,1.1\nB,120,90,0.6,2001,1.4\nC,160,210,0.3,2001,0.7\nC,160,210,0.3,2002,0.8\n",
    )
    .unwrap();
    let out = tmp.path().join("cv");
    ok(&[
        "cv",
        "--mesh",
        s(&data.join("mesh.json")),
        "--obs",
        s(&obs),
        "--mode",
        "stationary",
        "--cv-mode",
        "refit",
        "--out",
        s(&out),
    ]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("cv_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["folds"], 3);
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    let rows: Vec<&str> = scores.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "station_id,year,crps,sq_error");
    assert_eq!(rows.len(), 1 + 5);
    let crps: Vec<f64> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let avg = summary["summary"]["crps_avg"].as_f64().unwrap();
    assert!((crps.iter().sum::<f64>() / 5.0 - avg).abs() < 1e-12);
}

#[test]
fn invalid_csv_rows_report_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(tmp.path());
    let data = tmp.path().join("data");
    ok(&["simulate", "--scenario", s(&sc), "--out", s(&data)]);
    let obs = tmp.path().join("bad.csv");
    fs::write(
        &obs,
        "station_id,x_km,y_km,elevation_km,year,value_m\nA,40,50,0.1,2001,0.9\nB,120,90,0.6,2001,oops\n",
    )
    .unwrap();
    let out = spde(&[
        "fit",
        "--mesh",
        s(&data.join("mesh.json")),
        "--obs",
        s(&obs),
        "--out",
        s(&tmp.path().join("f")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn study_writes_report_and_tables_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["study", "--scenario", s(&sc), "--out", s(&a), "--jobs", "1"]);
    ok(&["study", "--scenario", s(&sc), "--out", s(&b), "--jobs", "4"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    for f in [
        "study.json",
        "fig8.csv",
        "fig9.csv",
        "fig10.csv",
        "fig11.csv",
        "fig12.csv",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let v: Value = serde_json::from_str(&fs::read_to_string(a.join("study.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["schema_version"], 1);
    assert_eq!(v["report"]["cells"].as_array().unwrap().len(), 4);
    assert!(fs::read_to_string(a.join("fig8.csv")).unwrap().contains("config_hash="));
}
