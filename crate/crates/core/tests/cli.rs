//! End-to-end checks of the command-line stages: artifact layout, exit
//! codes, override plumbing, and byte-level idempotency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

fn write_config(dir: &Path) -> PathBuf {
    let cfg = format!(
        "paths.catalog = {catalog}\n\
         paths.interactions = {interactions}\n\
         paths.checkpoint = {ckpt}\n\
         paths.out_dir = {out}\n\
         dims.d = 16\n\
         dims.d_a = 4\n\
         model.width = 16\n\
         model.max_len = 30\n\
         train.lr = 0.003\n\
         train.epochs = 2\n\
         train.batch = 16\n",
        catalog = fixture_dir().join("catalog.jsonl").display(),
        interactions = fixture_dir().join("interactions.jsonl").display(),
        ckpt = dir.join("model.ckpt").display(),
        out = dir.join("out").display(),
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossrec"))
        .args(args)
        .env_remove("CROSSREC_BACKEND_URL")
        .output()
        .expect("binary runs")
}

/// Answers exactly one generation request with the given text.
fn one_shot_generation_server(text: &str) -> (std::net::SocketAddr, std::thread::JoinHandle<()>) {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let body = format!("{{\"text\":{}}}", serde_json::to_string(text).unwrap());
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap();
            }
            if line == "\r\n" {
                break;
            }
        }
        let mut request = vec![0u8; content_length];
        reader.read_exact(&mut request).unwrap();
        let req: serde_json::Value = serde_json::from_slice(&request).unwrap();
        assert!(req["prompt"].as_str().unwrap().contains("The user has bought these items:"));
        let reply = format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
            body.len(),
            body
        );
        stream.write_all(reply.as_bytes()).unwrap();
    });
    (addr, handle)
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_stage_sequence_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let out = run(&["prepare", "--config", cfg]);
    assert_code(&out, 0);
    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("prepare prints a JSON summary");
    assert_eq!(summary["users"], 200);
    assert!(dir.path().join("out/prepared.json").exists());

    assert_code(&run(&["build-graphs", "--config", cfg]), 0);
    for g in ["attr", "full", "domain_a", "domain_b"] {
        let p = dir.path().join(format!("out/graphs/{g}.tsv"));
        let body = std::fs::read_to_string(&p).unwrap();
        assert!(body.lines().next().unwrap().split('\t').count() == 3, "{g} dump is src\\tdst\\tweight");
    }

    assert_code(&run(&["train", "--config", cfg]), 0);
    assert!(dir.path().join("model.ckpt").exists());
    assert!(dir.path().join("model.ckpt.index").exists());
    assert!(dir.path().join("out/train_log.json").exists());

    assert_code(&run(&["export-prompts", "--config", cfg]), 0);
    let tuning = std::fs::read_to_string(dir.path().join("out/tuning.jsonl")).unwrap();
    assert_eq!(tuning.lines().count(), 200);
    assert!(dir.path().join("out/tuning.meta.json").exists());

    let out = run(&["recommend", "--config", cfg, "--user", "0", "--domain", "B", "--backend", "mock"]);
    assert_code(&out, 0);
    let answer: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(answer["source"].is_string());
    assert_eq!(answer["domain"], "B");
    assert!(answer["items"].as_array().unwrap().len() <= 10);

    let started = std::time::Instant::now();
    let out = run(&["evaluate", "--config", cfg, "--split", "test", "--backend", "mock"]);
    assert_code(&out, 0);
    assert!(started.elapsed() < std::time::Duration::from_secs(60), "evaluate must stay fast");

    // http backend: flag plumbing through to a live endpoint
    let (addr, server) = one_shot_generation_server("game g064");
    let out = run(&[
        "recommend",
        "--config",
        cfg,
        "--user",
        "0",
        "--domain",
        "B",
        "--backend",
        "http",
        "--backend-url",
        &format!("http://{addr}"),
    ]);
    assert_code(&out, 0);
    server.join().unwrap();
    let answer: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // the generated title grounds to item 64 first, all in domain B
    assert_eq!(answer["source"], "Grounded");
    assert_eq!(answer["items"][0]["id"], 64);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report_test.json")).unwrap())
            .unwrap();
    assert_eq!(report["reports"][0]["partition"], "all");
    let trace = std::fs::read_to_string(dir.path().join("out/trace_test.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 200);
}

#[test]
fn stages_are_idempotent_at_the_byte_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert_code(&run(&["train", "--config", cfg]), 0);
    let first = std::fs::read(dir.path().join("model.ckpt")).unwrap();
    let first_index = std::fs::read(dir.path().join("model.ckpt.index")).unwrap();
    assert_code(&run(&["train", "--config", cfg]), 0);
    assert_eq!(first, std::fs::read(dir.path().join("model.ckpt")).unwrap());
    assert_eq!(first_index, std::fs::read(dir.path().join("model.ckpt.index")).unwrap());

    assert_code(&run(&["evaluate", "--config", cfg, "--backend", "mock"]), 0);
    let report = std::fs::read(dir.path().join("out/report_test.json")).unwrap();
    let trace = std::fs::read(dir.path().join("out/trace_test.jsonl")).unwrap();
    assert_code(&run(&["evaluate", "--config", cfg, "--backend", "mock"]), 0);
    assert_eq!(report, std::fs::read(dir.path().join("out/report_test.json")).unwrap());
    assert_eq!(trace, std::fs::read(dir.path().join("out/trace_test.jsonl")).unwrap());

    assert_code(&run(&["export-prompts", "--config", cfg]), 0);
    let tuning = std::fs::read(dir.path().join("out/tuning.jsonl")).unwrap();
    assert_code(&run(&["export-prompts", "--config", cfg]), 0);
    assert_eq!(tuning, std::fs::read(dir.path().join("out/tuning.jsonl")).unwrap());
}

#[test]
fn exit_codes_distinguish_usage_config_and_data_errors() {
    // usage / unknown command
    assert_code(&run(&[]), 1);
    assert_code(&run(&["frobnicate"]), 1);
    assert_code(&run(&["train", "--bogus-flag"]), 1);

    // config errors
    assert_code(&run(&["train", "--config", "/nonexistent/config.cfg"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "train.lambda = -1\n").unwrap();
    assert_code(&run(&["train", "--config", bad.to_str().unwrap()]), 1);

    // data errors name the missing path
    let cfg = dir.path().join("missing_data.cfg");
    std::fs::write(&cfg, "paths.catalog = /nonexistent/catalog.jsonl\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("/nonexistent/catalog.jsonl"),
        "the error message names the path"
    );

    // runtime errors: evaluating without a checkpoint
    let cfg = write_config(dir.path());
    assert_code(&run(&["evaluate", "--config", cfg.to_str().unwrap()]), 3);
}

#[test]
fn overrides_reach_the_training_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    // --train.epochs=1 must beat the config file's 2
    assert_code(&run(&["train", "--config", cfg, "--train.epochs=1"]), 0);
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/train_log.json")).unwrap())
            .unwrap();
    assert_eq!(log["epochs"], 1);
    assert_eq!(log["epoch_lt"].as_array().unwrap().len(), 1);

    // unknown override keys are config errors
    assert_code(&run(&["train", "--config", cfg, "--train.nonsense=1"]), 1);
}
