use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sbart::posterior::Posterior;

fn sbart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbart"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sbart(args);
    assert!(
        out.status.success(),
        "sbart {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn friedman_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("friedman_{n}_{seed}.csv"));
    ok(&["gen", "friedman", "--n", &n.to_string(), "--p", "6", "--seed", &seed.to_string(), "--out", s(&path)]);
    path
}

#[test]
fn train_writes_header_validated_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let data = friedman_csv(dir.path(), 50, 1);
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--trees", "5", "--iters", "20", "--burnin", "0", "--out", s(&out)]);
    let post = Posterior::read(&out.join("posterior.bin")).unwrap();
    assert_eq!(post.samples.len(), 20);
    assert_eq!(post.header.trees, 5);
    assert_eq!(post.header.meta.names.len(), 6);
    assert_eq!(post.header.config.iterations, 20);
    let diag = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 21);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["counters"]["max_reductions_per_update"], 2);
}

#[test]
fn predict_writes_intervals_and_refuses_other_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let data = friedman_csv(dir.path(), 60, 2);
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--trees", "5", "--iters", "20", "--burnin", "10", "--out", s(&out)]);
    let post = out.join("posterior.bin");

    let pred_dir = dir.path().join("pred");
    ok(&["predict", "--posterior", s(&post), "--data", s(&data), "--out", s(&pred_dir)]);
    let text = std::fs::read_to_string(pred_dir.join("predictions.csv")).unwrap();
    assert!(text.starts_with("row,mean,q0.025,q0.975"));
    assert_eq!(text.lines().count(), 61);

    // Same rows with one covariate renamed.
    let renamed = dir.path().join("renamed.csv");
    let original = std::fs::read_to_string(&data).unwrap();
    std::fs::write(&renamed, original.replacen("x1,", "z1,", 1)).unwrap();
    let refused_dir = dir.path().join("refused");
    let out = sbart(&["predict", "--posterior", s(&post), "--data", s(&renamed), "--out", s(&refused_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not match"));
    assert!(!refused_dir.exists());
}

#[test]
fn parse_errors_name_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    let mut text = String::from("x1,x2,x3,y\n");
    for i in 0..10 {
        let cell = if i == 6 { "oops".to_string() } else { i.to_string() };
        text += &format!("{i},{i},{cell},{i}\n");
    }
    std::fs::write(&data, text).unwrap();
    let out_dir = dir.path().join("run");
    let out = sbart(&["train", "--data", s(&data), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 7, column x3"), "{err}");
    assert!(!out_dir.exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = friedman_csv(dir.path(), 40, 3);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "workers = 2\n[sampler]\ntrees = 3\niterations = 50\nburn_in = 45\n").unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--iters", "12", "--burnin", "2", "--out", s(&out)]);
    let post = Posterior::read(&out.join("posterior.bin")).unwrap();
    assert_eq!(post.header.trees, 3);
    assert_eq!(post.samples.len(), 10);
}

#[test]
fn worker_count_and_transport_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = friedman_csv(dir.path(), 80, 4);
    let mut files = Vec::new();
    for (k, transport) in [("1", "inproc"), ("2", "inproc"), ("3", "tcp")] {
        let out = dir.path().join(format!("run{k}"));
        ok(&[
            "train", "--data", s(&data), "--trees", "4", "--iters", "15", "--burnin", "5", "--workers", k, "--transport", transport, "--out",
            s(&out),
        ]);
        files.push(std::fs::read(out.join("posterior.bin")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn multi_process_tcp_matches_single_process() {
    let dir = tempfile::tempdir().unwrap();
    let data = friedman_csv(dir.path(), 90, 5);
    let topology = dir.path().join("ranks.txt");
    std::fs::write(
        &topology,
        format!("# rank 0 is the master\n127.0.0.1:{}\n127.0.0.1:{}\n127.0.0.1:{}\n", free_port(), free_port(), free_port()),
    )
    .unwrap();
    let common = ["--data", s(&data), "--trees", "4", "--iters", "15", "--burnin", "5"];
    let workers: Vec<_> = (1..3)
        .map(|rank| {
            Command::new(env!("CARGO_BIN_EXE_sbart"))
                .arg("train")
                .args(common)
                .args(["--topology", s(&topology), "--rank", &rank.to_string()])
                .spawn()
                .unwrap()
        })
        .collect();
    let dist = dir.path().join("dist");
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--topology", s(&topology), "--rank", "0", "--out", s(&dist)]);
    ok(&args);
    for mut w in workers {
        assert!(w.wait().unwrap().success());
    }
    let single = dir.path().join("single");
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--out", s(&single)]);
    ok(&args);
    assert_eq!(
        std::fs::read(dist.join("posterior.bin")).unwrap(),
        std::fs::read(single.join("posterior.bin")).unwrap()
    );
}

#[test]
fn mismatched_worker_settings_fail_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let data = friedman_csv(dir.path(), 40, 6);
    let topology = dir.path().join("ranks.txt");
    std::fs::write(&topology, format!("127.0.0.1:{}\n127.0.0.1:{}\n", free_port(), free_port())).unwrap();
    let worker = Command::new(env!("CARGO_BIN_EXE_sbart"))
        .args(["train", "--data", s(&data), "--trees", "4", "--iters", "10", "--burnin", "2", "--seed", "99"])
        .args(["--topology", s(&topology), "--rank", "1"])
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let master = sbart(&[
        "train", "--data", s(&data), "--trees", "4", "--iters", "10", "--burnin", "2", "--topology", s(&topology), "--rank", "0", "--out",
        s(&dir.path().join("m")),
    ]);
    let worker = worker.wait_with_output().unwrap();
    assert!(!master.status.success());
    assert!(!worker.status.success());
    assert!(String::from_utf8_lossy(&master.stderr).contains("configuration hash"));
}

#[test]
fn bench_reports_timings_and_efficiency() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&[
        "bench", "--n", "300", "--n-test", "50", "--p", "5", "--workers", "1,2", "--trees", "5", "--iters", "20", "--burnin", "10", "--out",
        s(&out),
    ]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for suite in json.as_array().unwrap() {
        assert!(suite["wall_time_seconds"]["1"].is_number());
        assert!(suite["wall_time_seconds"]["2"].is_number());
        assert!(suite["efficiency_vs_two"]["2"].is_number());
        assert_eq!(suite["identical_across_workers"], true);
    }
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.lines().next().unwrap().contains("truth"));
}

#[test]
fn gen_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        ok(&["gen", "logistic", "--n", "100", "--p", "3", "--seed", "9", "--out", s(p)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let out = sbart(&["gen", "friedman", "--p", "3", "--out", s(&dir.path().join("c.csv"))]);
    assert!(!out.status.success());
}
