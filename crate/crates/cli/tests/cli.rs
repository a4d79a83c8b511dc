use std::process::{Command, Output};

fn visens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visens"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn default_config_round_trips_through_a_file() {
    let out = visens(&["default-config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("schema_version = 1"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.toml");
    std::fs::write(&path, text.replace("duration = 20.0", "duration = 2.0")).unwrap();
    let out = visens(&[
        "gravity-init",
        "--config",
        path.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("angle_rad,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn montecarlo_writes_json_and_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("mc.toml");
    std::fs::write(&config, "trials = 2\n[trajectory]\nduration = 3.0\n").unwrap();
    let json = dir.path().join("out.json");
    let out = visens(&[
        "montecarlo",
        "--config",
        config.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 trials, 0 diverged"));
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(value["trials"], 2);
    assert_eq!(value["config"]["trajectory"]["duration"], 3.0);

    let csv = dir.path().join("out.csv");
    let out = visens(&[
        "montecarlo",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "4",
        "--trials",
        "1",
        "--format",
        "csv",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t_s,align_tx_err_m_mean,"));
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 13));
}

#[test]
fn runs_are_reproducible() {
    let args = [
        "montecarlo",
        "--trials",
        "1",
        "--seed",
        "9",
        "--format",
        "csv",
    ];
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("short.toml");
    std::fs::write(&config, "[trajectory]\nduration = 3.0\n").unwrap();
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--config", config.to_str().unwrap()]);
    let a = visens(&full);
    let b = visens(&full);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn invalid_input_exits_with_one() {
    let out = visens(&["montecarlo", "--trials", "0"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trials must be at least 1"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    assert_eq!(
        code(&visens(&["bounds", "--config", bad.to_str().unwrap()])),
        1
    );
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        code(&visens(&["bounds", "--config", missing.to_str().unwrap()])),
        1
    );
    assert_eq!(code(&visens(&["montecarlo", "--format", "xml"])), 1);
    assert_eq!(code(&visens(&["no-such-command"])), 1);
}

#[test]
fn help_and_version_exit_with_zero() {
    let out = visens(&["--help"]);
    assert_eq!(code(&out), 0);
    let help = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "montecarlo",
        "bounds",
        "gauge-check",
        "gravity-init",
        "default-config",
    ] {
        assert!(help.contains(cmd), "{cmd}");
    }
    assert_eq!(code(&visens(&["--version"])), 0);
}
