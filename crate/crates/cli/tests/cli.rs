use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gpeoe::SceneConfig;

fn gpeoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpeoe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn write_scene(dir: &Path, scene: &SceneConfig) {
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(scene).unwrap()).unwrap();
}

#[test]
fn verbs_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_scene(d, &SceneConfig::pillars_and_wall());

    let out = gpeoe(&["synth", "--scene", "scene.json", "--out", "run", "--seed", "2"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("run/measurements.csv").exists());

    let out = gpeoe(&["map", "--scene", "scene.json", "--measurements", "run/measurements.csv", "--out", "run"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ips = fs::read_to_string(d.join("run/ips.csv")).unwrap();
    assert!(ips.starts_with("path_id,x,y,residual_cost,converged\n"));

    let out = gpeoe(&["cluster", "--ips", "run/ips.csv", "--out", "run"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let clusters: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/clusters.json")).unwrap()).unwrap();
    assert_eq!(clusters["clusters"].as_array().unwrap().len(), 3);

    let out = gpeoe(&["fit", "--training", "run/training_cluster_1.csv", "--out", "run"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pred = fs::read_to_string(d.join("run/prediction_cluster_1.csv")).unwrap();
    assert!(pred.starts_with("theta_rad,mean_m,var_m2,ci_lo,ci_hi\n"));
    assert_eq!(pred.lines().count(), 361);
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/model_cluster_1.json")).unwrap()).unwrap();
    assert_eq!(model["cluster_id"], 1);
    assert!(model["hyper"]["length_scale_sq"].as_f64().unwrap() > 0.0);
    assert!(d.join("run/contour_cluster_1.csv").exists());
}

#[test]
fn slam_verb_writes_result_and_points() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let truth = SceneConfig::pillars_and_wall();
    write_scene(d, &truth);
    assert_eq!(code(&gpeoe(&["synth", "--scene", "scene.json", "--out", "."], d)), 0);

    // The receiver is unknown to the estimator.
    let mut blind = truth.clone();
    blind.rx = None;
    fs::write(d.join("blind.json"), serde_json::to_string(&blind).unwrap()).unwrap();
    let out = gpeoe(&["slam", "--scene", "blind.json", "--measurements", "measurements.csv", "--out", "s"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let res: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s/slam.json")).unwrap()).unwrap();
    let x = res["rx_estimate"]["position"][0].as_f64().unwrap();
    assert!((x - 8.0).abs() < 2.0, "{res}");
    assert_eq!(res["inlier_ids"].as_array().unwrap().len() + res["outlier_ids"].as_array().unwrap().len(), 72);
    assert!(d.join("s/ips.csv").exists());
}

#[test]
fn pipeline_config_resolves_relative_paths_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("cfg")).unwrap();
    write_scene(&d.join("cfg"), &SceneConfig::pillars_and_wall());
    fs::write(
        d.join("cfg/run.json"),
        r#"{"mode": "mapping", "scene_file": "scene.json", "output_dir": "a", "dbscan": {"eps": 0.5, "min_pts": 4}}"#,
    )
    .unwrap();

    let out = gpeoe(&["pipeline", "--config", "cfg/run.json", "--seed", "9"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("cfg/a/manifest.json").exists());
    let out = gpeoe(&["pipeline", "--config", "cfg/run.json", "--seed", "9", "--out", "b"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let manifest = |p: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join(p)).unwrap()).unwrap()
    };
    let (a, b) = (manifest("cfg/a/manifest.json"), manifest("b/manifest.json"));
    assert_eq!(a["status"], "ok");
    assert_eq!(a["artifacts"], b["artifacts"]);
}

#[test]
fn eval_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpeoe(
        &["eval", "--shape", "circle", "--m", "8,16", "--iterations", "4", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("e/eval_rmse.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("# noise_std=0.1"));
    assert_eq!(lines.next(), Some("shape,m,mean_rmse,failures"));
    assert!(lines.next().unwrap().starts_with("circle,8,"));
    assert!(dir.path().join("e/eval_report.json").exists());
}

#[test]
fn mapping_without_rx_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = SceneConfig::pillars_and_wall();
    scene.rx = None;
    write_scene(dir.path(), &scene);
    let out = gpeoe(&["pipeline", "--scene", "scene.json", "--out", "o"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rx"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn malformed_row_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &SceneConfig::pillars_and_wall());
    fs::write(dir.path().join("m.csv"), "path_id,toa_s,aod_rad,aoa_rad\n1,4e-8,0.1,0.2\n2,4e-8,x,0.2\n").unwrap();
    let out = gpeoe(&["map", "--scene", "scene.json", "--measurements", "m.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn degree_values_without_flag_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &SceneConfig::pillars_and_wall());
    fs::write(dir.path().join("m.csv"), "path_id,toa_s,aod_rad,aoa_rad\n1,4e-8,45,120\n").unwrap();
    let out = gpeoe(&["map", "--scene", "scene.json", "--measurements", "m.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("units=deg,ns"));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &SceneConfig::pillars_and_wall());
    let out = gpeoe(&["map", "--scene", "scene.json", "--measurements", "nope.csv"], dir.path());
    assert_eq!(code(&out), 4);
}

#[test]
fn too_few_paths_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &SceneConfig::pillars_and_wall());
    fs::write(
        dir.path().join("m.csv"),
        "path_id,toa_s,aod_rad,aoa_rad\n1,4e-8,0.1,0.2\n2,4.1e-8,0.5,-0.2\n3,3e-8,1.0,2.0\n",
    )
    .unwrap();
    let out = gpeoe(&["slam", "--scene", "scene.json", "--measurements", "m.csv"], dir.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gpeoe(&["fit", "--bogus"], dir.path())), 2);
}

#[test]
fn config_biases_and_monte_carlo_sections_parse() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.json"),
        r#"{"biases": {"1": [0.05, 0.0]}, "monte_carlo": {"m_values": [8], "iterations": 2}}"#,
    )
    .unwrap();
    let out = gpeoe(&["eval", "--config", "run.json", "--shape", "circle", "--out", "e"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(d.join("e/eval_rmse.csv")).unwrap();
    assert!(table.lines().nth(2).unwrap().starts_with("circle,8,"));
}
