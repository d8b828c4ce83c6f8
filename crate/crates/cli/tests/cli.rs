use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvo"))
        .args(args)
        .output()
        .expect("spawn mvo")
}

fn ok(args: &[&str]) -> String {
    let out = mvo(args);
    assert!(
        out.status.success(),
        "mvo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, frames: &str) {
    ok(&["gen", "--preset", "occlusion", "--frames", frames, "--sigma", "0.5", "--seed", "3", "--out", s(dir)]);
}

fn run(data: &Path, out: &Path, extra: &[&str]) {
    let tracklets = data.join("tracklets.csv");
    let calib = data.join("calib.json");
    let mut args = vec!["run", "--tracklets", s(&tracklets), "--calib", s(&calib), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_run_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    gen(&data, "24");
    for f in ["tracklets.csv", "calib.json", "scene.json", "truth_tracks.csv", "truth_poses.csv"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    run(&data, &out, &["--mode", "sliding", "--estimator", "wnoa", "--seed", "7"]);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["flavor"], "wnoa");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let ego = manifest["egomotion_label"].as_i64().expect("egomotion label");
    for f in manifest["files"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).is_file(), "{f}");
    }
    let status = fs::read_to_string(out.join("track_status.csv")).unwrap();
    assert!(status.starts_with("track_id,frame,status\n"));

    let stdout = ok(&["eval", "--run", s(&out), "--truth", s(&data)]);
    assert!(stdout.contains("max GE"));
    let report = fs::read_to_string(out.join("error_report.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(report.as_bytes());
    let bodies: Vec<(i64, i64)> = rows
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap())
        })
        .collect();
    assert!(bodies.contains(&(ego, -1)), "{bodies:?}");
    assert!(bodies.iter().any(|(_, b)| *b == 2), "{bodies:?}");
    let plot = fs::read_to_string(out.join("error_plot.csv")).unwrap();
    assert!(plot.starts_with("frame,label,ex,ey,ez,eroll,epitch,eyaw\n"));
}

#[test]
fn identical_seeds_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "16");
    let out = tmp.path().join("run");
    let snapshot = || -> Vec<(String, Vec<u8>)> {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f.as_str().unwrap().to_string())
            .chain(["manifest.json".to_string()])
            .map(|f| {
                let bytes = fs::read(out.join(&f)).unwrap();
                (f, bytes)
            })
            .collect()
    };
    run(&data, &out, &["--seed", "11", "--estimator", "wnoj"]);
    let first = snapshot();
    fs::remove_dir_all(&out).unwrap();
    run(&data, &out, &["--seed", "11", "--estimator", "wnoj"]);
    let second = snapshot();
    assert!(first.len() > 5);
    assert_eq!(first.len(), second.len());
    for ((f, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn config_file_is_honored_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "10");
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"mode": "full-batch", "seed": 5, "estimator": {"flavor": "pose-only"}, "per_window_output": false}"#).unwrap();
    run(&data, &out, &["--config", s(&cfg), "--seed", "6"]);
    let written = mvo::config::RunConfig::from_json(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written.mode, mvo::config::Mode::FullBatch);
    assert_eq!(written.flavor(), mvo::estimation::Flavor::PoseOnly);
    assert_eq!(written.seed, 6);
    assert!(!out.join("windows").exists());
    let header = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("T33"), "pose-only has no velocity columns");
}

#[test]
fn malformed_input_fails_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("t.csv");
    fs::write(&bad, "frame,track_id,u,v,d\n0,1,abc,2,3\n").unwrap();
    let calib = tmp.path().join("c.json");
    fs::write(&calib, r#"{"f_u": 800, "f_v": 800, "u0": 320, "v0": 240, "b": 0.5}"#).unwrap();
    let out = mvo(&["run", "--tracklets", s(&bad), "--calib", s(&calib), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let missing = mvo(&["run", "--tracklets", "/nonexistent.csv", "--calib", s(&calib)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    fs::write(&calib, r#"{"f_u": -1, "f_v": 800, "u0": 320, "v0": 240, "b": 0.5}"#).unwrap();
    let gen_dir = tmp.path().join("g");
    gen(&gen_dir, "6");
    let t = gen_dir.join("tracklets.csv");
    let neg = mvo(&["run", "--tracklets", s(&t), "--calib", s(&calib), "--out", s(&tmp.path().join("o2"))]);
    assert!(!neg.status.success());
}

#[test]
fn jacobian_check_passes() {
    let stdout = ok(&["--threads", "2", "jacobian-check", "--samples", "100"]);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), 7, "{stdout}");
}
