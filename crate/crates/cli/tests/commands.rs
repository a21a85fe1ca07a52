use std::path::Path;
use std::process::{Command, Output};

const NOISELESS: &str = "\
[sensor]
detect_prob = 1.0
centroid_sigma = 0.0
feature_noise_sigma = 0.0
confusion_prob = 0.0
false_positive_rate = 0.0
cluster_sigma = 0.0

[odometry]
trans_sigma = 0.0
rot_sigma = 0.0
";

fn sparseloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparseloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn run_ok(args: &[&str]) -> Output {
    let o = sparseloc(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

fn lines(path: impl AsRef<Path>) -> Vec<String> {
    String::from_utf8(read(path)).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn simulate_writes_headed_logs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 7\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap(), "--quiet"]);
    run_ok(&["simulate", "--config", &cfg, "--out", b.to_str().unwrap(), "--quiet"]);
    for name in ["map_log.jsonl", "detections.jsonl", "ground_truth.jsonl"] {
        assert_eq!(read(a.join(name)), read(b.join(name)), "{name} differs");
    }
    let log = lines(a.join("detections.jsonl"));
    assert_eq!(log.len(), 401);
    let header: serde_json::Value = serde_json::from_str(&log[0]).unwrap();
    assert_eq!(header["seed"], 7);
    assert_eq!(header["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(lines(a.join("ground_truth.jsonl")).len(), 401);

    let c = dir.path().join("c");
    run_ok(&["simulate", "--config", &cfg, "--seed", "8", "--out", c.to_str().unwrap(), "--quiet"]);
    assert_ne!(read(a.join("detections.jsonl")), read(c.join("detections.jsonl")));
    let header: serde_json::Value = serde_json::from_str(&lines(c.join("detections.jsonl"))[0]).unwrap();
    assert_eq!(header["seed"], 8);
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), "[sensor]\nmax_range = 40.0\n");
    let o = sparseloc(&["simulate", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "seed = 1\n[sensor]\nmax_range = \"far\"\n");
    let o = sparseloc(&["simulate", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = sparseloc(&["simulate", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    let o = sparseloc(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = sparseloc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn noiseless_map_has_one_instance_per_landmark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("seed = 4\n{NOISELESS}"));
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    run_ok(&["simulate", "--config", &cfg, "--out", out_s, "--quiet"]);
    let o = run_ok(&["build-map", "--config", &cfg, "--out", out_s]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("K = 300"));
    let first = read(out.join("map.json"));
    let map: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(map["instances"].as_array().unwrap().len(), 300);
    assert_eq!(map["metadata"]["seed"], 4);
    assert!(map["metadata"]["config_hash"].is_string());
    assert!(map["instances"][0]["obs_count"].as_u64().unwrap() >= 1);

    run_ok(&["build-map", "--config", &cfg, "--out", out_s, "--quiet"]);
    assert_eq!(read(out.join("map.json")), first);

    // Poses supplied separately must give the same map.
    let gt = dir.path().join("gt");
    std::fs::create_dir_all(&gt).unwrap();
    let log: Vec<String> = lines(out.join("map_log.jsonl"))
        .iter()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if let Some(obj) = v.as_object_mut() {
                if let Some(p) = obj.remove("gt_pose") {
                    let frame = obj["frame"].clone();
                    let rec = serde_json::json!({"frame": frame, "pose": p});
                    std::fs::OpenOptions::new()
                        .append(true)
                        .create(true)
                        .open(gt.join("poses.jsonl"))
                        .and_then(|mut f| std::io::Write::write_all(&mut f, format!("{rec}\n").as_bytes()))
                        .unwrap();
                }
            }
            v.to_string()
        })
        .collect();
    let stripped = gt.join("log.jsonl");
    std::fs::write(&stripped, log.join("\n") + "\n").unwrap();
    let o = sparseloc(&["build-map", "--config", &cfg, "--out", gt.to_str().unwrap(), "--detections", stripped.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "poses are required without gt_pose");
    run_ok(&[
        "build-map",
        "--config",
        &cfg,
        "--out",
        gt.to_str().unwrap(),
        "--detections",
        stripped.to_str().unwrap(),
        "--poses",
        gt.join("poses.jsonl").to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(read(gt.join("map.json")), first);
}

#[test]
fn empty_log_gives_empty_map_and_localize_rejects_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 2\n");
    let out = dir.path().to_str().unwrap();
    std::fs::write(dir.path().join("map_log.jsonl"), "").unwrap();
    let o = run_ok(&["build-map", "--config", &cfg, "--out", out]);
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let map: serde_json::Value = serde_json::from_slice(&read(dir.path().join("map.json"))).unwrap();
    assert!(map["instances"].as_array().unwrap().is_empty());

    std::fs::write(dir.path().join("detections.jsonl"), "").unwrap();
    let o = sparseloc(&["localize", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no instances"), "{}", stderr(&o));
}

#[test]
fn frame_pose_mismatch_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 2\n");
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    run_ok(&["simulate", "--config", &cfg, "--out", out_s, "--quiet"]);
    let short = dir.path().join("short.jsonl");
    std::fs::write(&short, lines(out.join("ground_truth.jsonl"))[..10].join("\n")).unwrap();
    let o = sparseloc(&[
        "build-map",
        "--config",
        &cfg,
        "--out",
        out_s,
        "--poses",
        short.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn full_pipeline_is_reproducible_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 3\n");
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = out.to_str().unwrap();
        run_ok(&["simulate", "--config", &cfg, "--out", o, "--quiet"]);
        run_ok(&["build-map", "--config", &cfg, "--out", o, "--quiet"]);
        run_ok(&["localize", "--config", &cfg, "--out", o, "--threads", "2", "--quiet"]);
        traces.push(out.join("trace.jsonl"));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(read(a.join("map.json")), read(b.join("map.json")));
    assert_eq!(read(&traces[0]), read(&traces[1]));
    let trace = lines(&traces[0]);
    assert_eq!(trace.len(), 401);
    let header: serde_json::Value = serde_json::from_str(&trace[0]).unwrap();
    assert_eq!(header["format"], "sparseloc-trace");
    assert_eq!(header["seed"], 3);
    let converged = trace[1..]
        .iter()
        .position(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["converged"] == true);
    assert!(converged.is_some_and(|f| f < 40), "{converged:?}");

    let o = run_ok(&["evaluate", "--out", a.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ATE"));
    let report: serde_json::Value = serde_json::from_slice(&read(a.join("metrics.json"))).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["thresholds"].as_array().unwrap().len(), 2);
    assert_eq!(report["thresholds"][0]["max_trans"], 4.0);
    assert_eq!(report["thresholds"][1]["max_rot"], 5.0);
    assert!(report["coarse"]["ate"].as_f64().unwrap() < 2.0);
    assert!(report["improvement"].is_number());
    assert_eq!(lines(a.join("aligned.csv")).len(), 401);

    run_ok(&["evaluate", "--out", a.to_str().unwrap(), "--threshold", "1,1", "--all-frames", "--quiet"]);
    let report: serde_json::Value = serde_json::from_slice(&read(a.join("metrics.json"))).unwrap();
    assert_eq!(report["thresholds"].as_array().unwrap().len(), 1);
    assert_eq!(report["window"], "all");
    assert_eq!(report["coarse"]["frames"], 400);
}

#[test]
fn label_mismatch_warns_and_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 5\n[localization]\nparticle_count = 200\n");
    let out = dir.path().to_str().unwrap();
    run_ok(&["simulate", "--config", &cfg, "--out", out, "--quiet"]);
    run_ok(&["build-map", "--config", &cfg, "--out", out, "--quiet"]);
    let log = dir.path().join("detections.jsonl");
    let renamed: Vec<String> = lines(&log)
        .iter()
        .map(|l| l.replace("\"label\":\"", "\"label\":\"other_"))
        .collect();
    std::fs::write(&log, renamed.join("\n") + "\n").unwrap();
    let o = run_ok(&["localize", "--config", &cfg, "--out", out, "--quiet"]);
    assert!(stderr(&o).contains("label"), "{}", stderr(&o));
    assert_eq!(lines(dir.path().join("trace.jsonl")).len(), 401);
}

#[test]
fn perfect_trace_scores_full_success() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("ground_truth.jsonl");
    let mut gt_lines = Vec::new();
    let mut trace_lines = Vec::new();
    for i in 0..5 {
        let pose = format!("[1,0,0,0,1,0,0,0,1,{},2,0]", i as f64 * 3.0);
        gt_lines.push(format!("{{\"frame\":{i},\"pose\":{pose}}}"));
        trace_lines.push(format!(
            "{{\"frame\":{i},\"coarse\":{pose},\"refined\":null,\"dispersion\":0.5,\"n_eff\":100.0,\"converged\":true}}"
        ));
    }
    std::fs::write(&gt, gt_lines.join("\n")).unwrap();
    std::fs::write(dir.path().join("trace.jsonl"), trace_lines.join("\n")).unwrap();
    run_ok(&["evaluate", "--out", dir.path().to_str().unwrap(), "--quiet"]);
    let report: serde_json::Value = serde_json::from_slice(&read(dir.path().join("metrics.json"))).unwrap();
    assert_eq!(report["coarse"]["ate"], 0.0);
    for s in report["coarse"]["success"].as_array().unwrap() {
        assert_eq!(s["rate"], 100.0);
    }
    assert!(report["refined"].is_null());

    std::fs::write(&gt, gt_lines[..4].join("\n")).unwrap();
    let o = sparseloc(&["evaluate", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_seed_and_a_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 11\n[localization]\nparticle_count = 300\n");
    let out = dir.path().to_str().unwrap();
    run_ok(&["bench", "--config", &cfg, "--seeds", "2", "--out", out, "--quiet"]);
    let csv = lines(dir.path().join("bench.csv"));
    assert_eq!(csv.len(), 4);
    assert!(csv[0].starts_with("seed,map_instances"));
    assert!(csv[1].starts_with("11,"));
    assert!(csv[2].starts_with("12,"));
    assert!(csv[3].starts_with("mean,"));
    let cols = csv[0].split(',').count();
    assert!(csv.iter().all(|l| l.split(',').count() == cols));
}
