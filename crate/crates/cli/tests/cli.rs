use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use qlkplan::config::Config;
use qlkplan::grid::Axis;
use qlkplan::sim::EpisodeTrace;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A temp dir holding a small config (10×6×10×4×4 grid).
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.game.grid.x = Axis::new(0.0, 2.0, 10);
        cfg.game.grid.v = Axis::new(0.0, 4.0, 4);
        cfg.planner.budget_ms = 0;
        cfg.planner.max_simulations = Some(100);
        cfg.scenario.reps = 3;
        std::fs::write(dir.path().join("small.toml"), cfg.to_toml_string()).unwrap();
        Workspace { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_qlkplan"));
        c.current_dir(self.dir.path()).args(args).env("RUST_LOG", "warn");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let ws = Workspace::new();
    for args in [
        vec![],
        vec!["fly"],
        vec!["run", "--seed", "many"],
        vec!["batch", "--planner", "blp2"],
        vec!["replay"],
    ] {
        assert_eq!(ws.run(&args).status.code(), Some(2), "{args:?}");
    }
    std::fs::write(ws.path("bad.toml"), "[game]\ndt = -1.0\n").unwrap();
    let out = ws.run(&["solve", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dt"));
    std::fs::write(ws.path("typo.toml"), "[planer]\neta0 = 1.0\n").unwrap();
    assert_eq!(ws.run(&["solve", "--config", "typo.toml"]).status.code(), Some(2));
    let out = ws.run(&["run", "--config", "small.toml", "--eta0", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(ws.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_without_tables_points_at_solve() {
    let ws = Workspace::new();
    let out = ws.run(&["run", "--config", "small.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("qlkplan solve --config small.toml"), "{err}");
}

#[test]
fn solve_caches_by_config_hash() {
    let ws = Workspace::new();
    let first = ws.ok(&["solve", "--config", "small.toml"]);
    assert!(first.starts_with("solved"), "{first}");
    let second = ws.ok(&["solve", "--config", "small.toml"]);
    assert!(second.starts_with("cache hit"), "{second}");
    let hash = Config::load(ws.path("small.toml")).unwrap().tables_hash();
    assert!(ws.path(&format!(".qlkplan/tables/{hash}.qlkt")).exists());
    assert!(ws.ok(&["solve", "--config", "small.toml", "--force"]).starts_with("solved"));
}

#[test]
fn run_writes_a_trace_that_replays() {
    let ws = Workspace::new();
    ws.ok(&["solve", "--config", "small.toml"]);
    let out = ws.ok(&["run", "--config", "small.toml", "--seed", "4", "--k", "2", "--lambda", "0.5", "--out", "traces"]);
    let path = ws.path(out.trim());
    let trace = EpisodeTrace::load(&path).unwrap();
    assert_eq!(trace.header.scenario.seed, 4);
    assert_eq!(trace.header.scenario.true_k, 2);
    assert!(path.starts_with(ws.path("traces")));

    let text = ws.ok(&["replay", path.to_str().unwrap()]);
    assert!(text.contains("outcome:"));
    let csv = ws.ok(&["replay", path.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(csv.lines().count(), trace.steps.len() + 1);
    ws.ok(&["replay", path.to_str().unwrap(), "--format", "csv", "--out", "t.csv"]);
    assert_eq!(std::fs::read_to_string(ws.path("t.csv")).unwrap(), csv);

    // A trace whose recorded successor disagrees with the dynamics is rejected.
    let mut lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let n = lines[1]["next_state"]["index"].as_u64().unwrap();
    lines[1]["next_state"]["index"] = (n + 1).into();
    let tampered = ws.path("tampered.jsonl");
    let body: String = lines.iter().map(|l| l.to_string() + "\n").collect();
    std::fs::write(&tampered, body).unwrap();
    let out = ws.run(&["replay", tampered.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("does not replay"));
}

fn read_traces(dir: &Path) -> Vec<EpisodeTrace> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| EpisodeTrace::load(e.unwrap().path()).unwrap()).collect();
    v.sort_by_key(|t| t.header.episode);
    v
}

#[test]
fn batch_blp1_runs_with_zero_eta() {
    let ws = Workspace::new();
    ws.ok(&["solve", "--config", "small.toml"]);
    let table = ws.ok(&[
        "batch", "--config", "small.toml", "--planner=blp1", "--eta0", "5", "--k", "1", "--lambda", "0.5,1.0", "--out", "b",
        "--traces",
    ]);
    assert_eq!(table.lines().count(), 3);
    let traces = read_traces(&ws.path("b/traces"));
    assert_eq!(traces.len(), 6);
    assert!(traces.iter().all(|t| t.header.planner.eta0 == 0.0));
    let metrics = std::fs::read_to_string(ws.path("b/metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("blp1,1,")));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ws.path("b/report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
    assert!(ws.path("b/inference.csv").exists());

    ws.ok(&["batch", "--config", "small.toml", "--planner", "ours,blp1", "--eta0", "5", "--k", "1", "--lambda", "1.0", "--out", "c", "--traces"]);
    let traces = read_traces(&ws.path("c/traces"));
    let eta: Vec<f64> = traces.iter().map(|t| t.header.planner.eta0).collect();
    assert!(eta.contains(&5.0) && eta.contains(&0.0));
}

#[test]
fn serve_answers_health() {
    let ws = Workspace::new();
    ws.ok(&["solve", "--config", "small.toml"]);
    let mut child = ws
        .cmd(&["serve", "--config", "small.toml", "--addr", "127.0.0.1:0", "--out", "sessions"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("{line}")).to_string();

    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let hash = Config::load(ws.path("small.toml")).unwrap().tables_hash();
    assert!(resp.contains(&hash));
    assert!(resp.contains("\"wire_version\":1"));
}
