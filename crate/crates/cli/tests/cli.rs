use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn anytime(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anytime"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn summary(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path.join("summary.json")).unwrap()).unwrap()
}

fn sat_csv(lambda: f64, delta: f64, beta: f64) -> String {
    let mut s = String::from("t,p,n\n");
    for i in 0..10 {
        let t = 0.3 + 0.1 * i as f64;
        let p = if t > delta { lambda * (1.0 - (-beta * (t - delta)).exp()) } else { 0.0 };
        s.push_str(&format!("{t},{p},100\n"));
    }
    s
}

#[test]
fn fit_recovers_set_size_sixteen_parameters() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("points.csv"), sat_csv(0.90, 0.25, 8.0)).unwrap();
    let out = anytime(dir.path(), &["fit", "--sat", "points.csv", "--gamma", "0", "--out", "fit"]);
    ok(&out);
    let s = summary(&dir.path().join("fit"));
    let fit = &s["results"]["sat"][0]["fit"];
    assert!((fit["lambda"].as_f64().unwrap() - 0.90).abs() < 0.009);
    assert!((fit["delta"].as_f64().unwrap() - 0.25).abs() < 0.0025);
    assert!((fit["beta"].as_f64().unwrap() - 8.0).abs() < 0.08);
    assert_eq!(s["effective_config"]["gamma"], 0.0);
    let plot = std::fs::read_to_string(dir.path().join("fit/fitted_curves.csv")).unwrap();
    assert_eq!(plot.lines().count(), 101);
    assert!(!dir.path().join("fit/.anytime.lock").exists());
}

#[test]
fn compare_reports_efficiency_percent() {
    let dir = tempfile::tempdir().unwrap();
    let out = anytime(dir.path(), &["compare", "--sigma-test", "0.06", "--sigma-ref", "0.75", "--out", "cmp"]);
    assert!(ok(&out).contains("0.6%"));
    let s = summary(&dir.path().join("cmp"));
    assert_eq!(s["results"]["efficiency"]["percent"], "0.6%");
    assert!((s["results"]["efficiency"]["efficiency"].as_f64().unwrap() - 0.0064).abs() < 1e-12);
}

#[test]
fn missing_dataset_lists_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = anytime(dir.path(), &["prepare", "--data-dir", "nowhere"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for f in ["data_batch_1.bin", "data_batch_5.bin", "test_batch.bin"] {
        assert!(err.contains(f), "{err}");
    }
}

#[test]
fn unknown_preset_lists_presets() {
    let dir = tempfile::tempdir().unwrap();
    let out = anytime(dir.path(), &["train", "--preset", "huge", "--synthetic", "100"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("paper") && err.contains("desk"), "{err}");
}

#[test]
fn config_file_sections_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("points.csv"), sat_csv(0.96, 0.32, 14.0)).unwrap();
    std::fs::write(
        dir.path().join("pipeline.toml"),
        "[fit]\nsat = \"points.csv\"\ngamma = 0.0\nout_dir = \"from-file\"\n\n[serve]\nport = 9999\n",
    )
    .unwrap();
    ok(&anytime(dir.path(), &["--config", "pipeline.toml", "fit"]));
    assert_eq!(summary(&dir.path().join("from-file"))["effective_config"]["gamma"], 0.0);
    ok(&anytime(dir.path(), &["fit", "--config", "pipeline.toml", "--out", "from-flag", "--gamma", "0.05"]));
    let s = summary(&dir.path().join("from-flag"));
    assert_eq!(s["effective_config"]["gamma"], 0.05);
    assert_eq!(s["effective_config"]["sat"], "points.csv");

    std::fs::write(dir.path().join("bad.toml"), "[fit]\nbogus = 1\n").unwrap();
    assert!(!anytime(dir.path(), &["--config", "bad.toml", "fit"]).status.success());
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("cmp")).unwrap();
    std::fs::write(dir.path().join("cmp/.anytime.lock"), "1").unwrap();
    let out = anytime(dir.path(), &["compare", "--sigma-test", "0.1", "--sigma-ref", "0.2", "--out", "cmp"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}

#[test]
fn train_evaluate_anytime_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&anytime(
        d,
        &["train", "--synthetic", "640", "--epochs", "1", "--validation-size", "64", "--out", "tr"],
    ));
    for f in ["best.ckpt", "final.ckpt", "train_log.csv", "summary.json"] {
        assert!(d.join("tr").join(f).exists(), "{f}");
    }
    assert_eq!(summary(&d.join("tr"))["effective_config"]["train"]["epochs"], 1);

    ok(&anytime(
        d,
        &["evaluate", "--checkpoint", "tr/best.ckpt", "--synthetic", "640", "--noise", "0,0.5", "--out", "ev"],
    ));
    let acc = std::fs::read_to_string(d.join("ev/accuracy.csv")).unwrap();
    assert_eq!(acc.lines().next().unwrap(), "exit_index,mflop,sd_0,sd_0.5");
    assert_eq!(acc.lines().count(), 5);

    ok(&anytime(
        d,
        &[
            "anytime", "--checkpoint", "tr/best.ckpt", "--synthetic", "640",
            "--noise", "0,0.25,0.5,0.75,1.0", "--out", "at",
        ],
    ));
    let curves = std::fs::read_to_string(d.join("at/curves.csv")).unwrap();
    let rows: Vec<Vec<String>> = curves.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    // 5 noise levels x (chance point + 4 exits)
    assert_eq!(rows.len(), 25);
    let chance: Vec<_> = rows.iter().filter(|r| r[1] == "-1").collect();
    assert_eq!(chance.len(), 5);
    assert!(chance.iter().all(|r| r[2] == "0.0" && r[3] == "0.1"));
}

fn human_p(sd: f64, ms: f64) -> f64 {
    // accuracy falls with noise variance, rises with viewing time
    let lam = 0.1 + 0.8 * (-(sd * sd) / 0.25).exp();
    if ms <= 300.0 {
        0.1
    } else {
        0.1 + (lam - 0.1) * (1.0 - (-0.005 * (ms - 300.0)).exp())
    }
}

#[test]
fn compare_builds_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut human = String::from("noise_sd,display_ms,p,n,trials,warning\n");
    for sd in [0.0, 0.2, 0.4, 0.8] {
        for ms in [200.0, 400.0, 600.0, 800.0, 1000.0, 1200.0] {
            human.push_str(&format!("{sd},{ms},{},1000,1000,\n", human_p(sd, ms)));
        }
    }
    // the network is the same observer on F = (11/600)(T - 400), with its
    // noise axis scaled by 1/2
    let mut net = String::from("noise_sd,exit_index,mflop,accuracy,n\n");
    for sd in [0.0, 0.1, 0.2, 0.4] {
        net.push_str(&format!("{sd},-1,0,0.1,0\n"));
        for k in 0..7 {
            let f = 2.0 + 2.0 * k as f64;
            let ms = f * 600.0 / 11.0 + 400.0;
            net.push_str(&format!("{sd},{k},{f},{},1000\n", human_p(2.0 * sd, ms)));
        }
    }
    std::fs::write(d.join("human.csv"), human).unwrap();
    std::fs::write(d.join("net.csv"), net).unwrap();
    ok(&anytime(
        d,
        &["compare", "--human", "human.csv", "--network", "net.csv", "--test-sd", "0.2", "--out", "cmp"],
    ));
    let s = summary(&d.join("cmp"));
    let r = &s["results"];
    let a = r["alignment"]["fit"]["map"]["a"].as_f64().unwrap();
    let t0 = r["alignment"]["fit"]["map"]["t0"].as_f64().unwrap();
    assert!((a / (11.0 / 600.0) - 1.0).abs() < 0.05, "a = {a}");
    assert!((t0 / 400.0 - 1.0).abs() < 0.05, "t0 = {t0}");
    // network at 0.2 matches the human at 0.4: efficiency (0.2 / 0.4)^2
    let eff = r["matched_efficiency"]["efficiency"].as_f64().unwrap();
    assert!((eff - 0.25).abs() < 0.03, "efficiency {eff}");
    assert!(r["network_equivalent_noise"]["fit"].is_object());
    assert!(r["human_equivalent_noise"]["fit"].is_object());
    assert!(d.join("cmp/fitted_network.csv").exists());
}

#[test]
fn export_converts_session_logs() {
    use anytime_experiment::store::SessionLog;
    use anytime_experiment::{BlockPlan, ImagePool, Session};
    let dir = tempfile::tempdir().unwrap();
    let sessions = dir.path().join("sessions");
    let plan = BlockPlan { trials_per_block: 4, ..BlockPlan::default() };
    let s = Session::create("abc", "p1", &plan, 1, &ImagePool::synthetic(20, 0)).unwrap();
    drop(SessionLog::create(&sessions, &s).unwrap());
    ok(&anytime(dir.path(), &["export", "--sessions", "sessions", "--out", "ex"]));
    let trials = std::fs::read_to_string(dir.path().join("ex/abc.csv")).unwrap();
    assert_eq!(trials.lines().count(), 21);
    assert!(dir.path().join("ex/aggregate.csv").exists());
}
