use std::process::Command;

fn mrslam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mrslam"))
}

#[test]
fn run_writes_every_result_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = mrslam()
        .args(["run", "--case", "4", "--seed", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("case 4 seed 1:"), "{stdout}");
    for f in ["metrics.csv", "channel_log.csv", "utilization.csv", "graph.g2o", "graph_robot1.g2o", "merged_map.csv", "config.toml"] {
        let p = dir.path().join(f);
        assert!(p.metadata().map(|m| m.len() > 0).unwrap_or(false), "{f} missing or empty");
    }
    let g = mrslam::io::load_g2o(&dir.path().join("graph.g2o")).unwrap();
    assert_eq!(g.fixed.len(), 1);
    assert!(!g.edges.is_empty());

    // the written config reproduces the run
    let again = tempfile::tempdir().unwrap();
    let st = mrslam()
        .arg("run")
        .arg("--config")
        .arg(dir.path().join("config.toml"))
        .arg("--out")
        .arg(again.path())
        .status()
        .unwrap();
    assert!(st.success());
    let read = |d: &std::path::Path| std::fs::read(d.join("channel_log.csv")).unwrap();
    assert_eq!(read(dir.path()), read(again.path()));
}

#[test]
fn default_config_round_trips() {
    let out = mrslam().args(["default-config", "--scenario", "drift-heavy"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg: mrslam::MissionConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg, mrslam::MissionConfig::for_scenario(mrslam::Scenario::DriftHeavy));
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(!mrslam().args(["run", "--case", "6"]).status().unwrap().success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "robots = 0\n").unwrap();
    let out = mrslam().arg("run").arg("--config").arg(&bad).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
