//! End-to-end runs of the `musctl` binary.

use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn musctl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_musctl"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    musctl().args(args).output().expect("spawn musctl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn free_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Starts `serve-env` and waits for its "listening on" line.
fn serve(addr: &str, plant: &str) -> Child {
    let mut child = musctl()
        .args(["serve-env", "--listen", addr, "--plant", plant])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    assert!(line.starts_with("listening on"), "{line}");
    child
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train", "--set", "agent=sarsa"])), 1);
    assert_eq!(code(&run(&["train", "--set", "no_equals_sign"])), 1);
    assert_eq!(
        code(&run(&["train", "--config", "/definitely/missing.conf"])),
        1
    );
    assert_eq!(code(&run(&["frobnicate"])), 1);
    // DQL only drives a single muscle.
    let out = run(&[
        "train",
        "--set",
        "agent=dql",
        "--set",
        "plant=reference",
        "--frames",
        "100",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn unreachable_workers_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--worker-addr",
        &free_port(),
        "--frames",
        "100",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_testset_is_frozen() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["gen-testset", "--out", path(a.path())])), 0);
    assert_eq!(code(&run(&["gen-testset", "--out", path(b.path())])), 0);
    let names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names.len(), 100);
    for n in &names {
        assert_eq!(
            fs::read(a.path().join(n)).unwrap(),
            fs::read(b.path().join(n)).unwrap()
        );
    }
    let first = fs::read_to_string(a.path().join("traj_000.csv")).unwrap();
    // Header plus 200 frames at 0.1 s, both ends included.
    assert_eq!(first.lines().count(), 202);
}

#[test]
fn train_evaluate_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--workers",
        "2",
        "--frames",
        "3000",
        "--set",
        "test.count=5",
        "--out",
        path(&run_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir.join("checkpoint.bin");
    assert!(ckpt.exists());
    let stats = fs::read_to_string(run_dir.join("stats.csv")).unwrap();
    assert!(stats.starts_with("frames,mean_episode_reward_last10,"));

    let out = run(&[
        "evaluate",
        "--checkpoint",
        path(&ckpt),
        "--workers",
        "2",
        "--traces",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = fs::read_to_string(run_dir.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 6);
    assert!(run_dir.join("eval_summary.csv").exists());
    assert_eq!(fs::read_dir(run_dir.join("traces")).unwrap().count(), 5);

    let t1 = dir.path().join("t1.csv");
    let t2 = dir.path().join("t2.csv");
    for t in [&t1, &t2] {
        let out = run(&[
            "trace",
            "--checkpoint",
            path(&ckpt),
            "--test-index",
            "3",
            "--out",
            path(t),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(&t1).unwrap();
    assert_eq!(a, fs::read(&t2).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("t,phi,phi_hat,"));

    let out = run(&[
        "trace",
        "--checkpoint",
        path(&ckpt),
        "--waypoints",
        "30,60,45",
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows = stdout.lines().count() - 1;
    assert!(rows > 0 && rows <= 100, "{rows}");

    // Wrong checkpoint for the plant.
    let out = run(&[
        "trace",
        "--checkpoint",
        path(&ckpt),
        "--set",
        "plant=reference",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn single_worker_training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        let out = run(&[
            "train",
            "--workers",
            "1",
            "--frames",
            "2500",
            "--seed",
            "9",
            "--out",
            path(&d),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push((
            fs::read(d.join("checkpoint.bin")).unwrap(),
            fs::read(d.join("stats.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn external_workers_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let addr = free_port();
    let mut server = serve(&addr, "single");
    let out = run(&[
        "train",
        "--worker-addr",
        &addr,
        "--frames",
        "1500",
        "--out",
        path(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // External servers outlive the run that used them.
    assert!(server.try_wait().unwrap().is_none());
    server.kill().unwrap();
    server.wait().unwrap();

    // A killed server is unreachable; a restarted one on the same port works.
    let out = run(&[
        "train",
        "--worker-addr",
        &addr,
        "--frames",
        "1500",
        "--out",
        path(&dir.path().join("y")),
    ]);
    assert_eq!(code(&out), 2);
    let mut server = serve(&addr, "single");
    let out = run(&[
        "train",
        "--worker-addr",
        &addr,
        "--frames",
        "1500",
        "--out",
        path(&dir.path().join("z")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    server.kill().unwrap();
    server.wait().unwrap();

    // Workers hosting the wrong plant are refused.
    let mut server = serve(&addr, "reference");
    let out = run(&[
        "train",
        "--worker-addr",
        &addr,
        "--frames",
        "1500",
        "--out",
        path(&dir.path().join("w")),
    ]);
    assert_ne!(code(&out), 0);
    let _ = server.kill();
    let _ = server.wait();
}
