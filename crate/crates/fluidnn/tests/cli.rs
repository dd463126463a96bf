mod common;

use std::io::{BufRead, BufReader};
use std::process::{Child, ChildStderr, Command, Output, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use fluidnn::error::exit;
use fluidnn::from_json_lines;
use fluidnn_core::data::load_checkpoint;
use fluidnn_core::model::SubnetId;
use fluidnn_core::Tensor;
use fluidnn_runtime::client::Client;
use fluidnn_runtime::ha::{predict, IMAGE_FLOATS};
use fluidnn_runtime::{ErrorCode, Message};

use common::{fixture, Fixture};

const BIN: &str = env!("CARGO_BIN_EXE_fluidnn");

fn fluidnn(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FLUIDNN_MNIST").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

fn write(f: &Fixture, name: &str, text: &str) -> String {
    let p = f.path(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let f = fixture(200, 1);
    let ckpt = s(&f.checkpoint);
    let mnist = s(f.mnist_dir());
    let good = write(&f, "ok.txt", "images 128\n100 kill worker\n");
    let bad = write(&f, "bad.txt", "100 kill worker\n50 restore worker\n");
    let cfg = write(&f, "bad.cfg", "policy = fluid\nflux = 3\n");

    assert_eq!(code(&fluidnn(&[])), 2);
    assert_eq!(code(&fluidnn(&["bench", "--bogus"])), 2);
    let o = fluidnn(&["run-scenario", &bad, "--checkpoint", ckpt, "--mnist", mnist]);
    assert_eq!(code(&o), i32::from(exit::SCENARIO));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = fluidnn(&["run-scenario", &good, "--checkpoint", "/nonexistent.fldn", "--mnist", mnist]);
    assert_eq!(code(&o), i32::from(exit::IO));
    let o = fluidnn(&["run-scenario", &good, "--config", &cfg, "--checkpoint", ckpt, "--mnist", mnist]);
    assert_eq!(code(&o), i32::from(exit::CONFIG));
    let o = fluidnn(&["run-scenario", &good, "--set", "flux=3", "--checkpoint", ckpt, "--mnist", mnist]);
    assert_eq!(code(&o), i32::from(exit::USAGE));
    let o = fluidnn(&["run-scenario", &good, "--checkpoint", ckpt, "--mnist", mnist, "--policy", "static", "--mode", "HT"]);
    assert_eq!(code(&o), i32::from(exit::CONFIG));
    let corrupt = write(&f, "corrupt.fldn", "FLDN but not really");
    let o = fluidnn(&["eval", "--checkpoint", &corrupt, "--mnist", mnist]);
    assert_eq!(code(&o), i32::from(exit::DATA));
    let o = fluidnn(&["run-scenario", &good, "--checkpoint", ckpt, "--mnist", mnist]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_scenario_writes_reports() {
    let f = fixture(1000, 2);
    let script = write(&f, "s.txt", "duration_ms 5000\n200 kill master\n");
    let csv = f.path("r.csv");
    let o = fluidnn(&["run-scenario", &script, "--checkpoint", s(&f.checkpoint), "--mnist", s(f.mnist_dir()), "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("window_start_ms,throughput_ips,accuracy,state,specs"));
    assert!(lines.any(|l| l.ends_with(",WORKER_ONLY,U50")), "{text}");

    let cfg = write(&f, "r.cfg", "format = json-lines\npolicy = dynamic\n");
    let o = fluidnn(&["run-scenario", &script, "--config", &cfg, "--checkpoint", s(&f.checkpoint), "--mnist", s(f.mnist_dir())]);
    assert_eq!(code(&o), 0);
    let report = from_json_lines(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert!(report.counts.conserved());
    assert_eq!(report.counts.failed + report.counts.completed, 1000);
    assert!(report.events.iter().any(|e| e.contains("HALTED")));
}

#[test]
fn train_eval_and_bench() {
    let f = fixture(300, 3);
    let out = f.path("trained.fldn");
    let log = f.path("train.csv");
    let o = fluidnn(&[
        "train", "--mnist", s(f.mnist_dir()), "--out", s(&out), "--log", s(&log), "--iters", "1", "--limit", "256",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    load_checkpoint(&out).unwrap();
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1 + 6);

    let o = fluidnn(&["eval", "--checkpoint", s(&out), "--mnist", s(f.mnist_dir())]);
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(names, ["W25", "W50", "W75", "W100", "U25", "U50"]);
    let o = fluidnn(&["eval", "--checkpoint", s(&out), "--mnist", s(f.mnist_dir()), "--spec", "U25"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1);

    let table = f.path("bench.csv");
    let o = fluidnn(&["bench", "--checkpoint", s(&out), "--mnist", s(f.mnist_dir()), "--out", s(&table)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 9);
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 1 + 9);
}

/// A child whose stdout announces an address and whose stderr is the structured log.
struct Service {
    child: Child,
    addr: String,
    log: mpsc::Receiver<String>,
}

impl Service {
    fn spawn(args: &[&str]) -> Service {
        let mut child = Command::new(BIN)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut first = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
        let addr = first.trim().rsplit(' ').next().unwrap().to_owned();
        let (tx, rx) = mpsc::channel();
        let stderr: ChildStderr = child.stderr.take().unwrap();
        thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                let _ = tx.send(line);
            }
        });
        Service { child, addr, log: rx }
    }

    fn wait_for(&self, needle: &str, within: Duration) -> Option<String> {
        let deadline = Instant::now() + within;
        while let Some(left) = deadline.checked_duration_since(Instant::now()) {
            match self.log.recv_timeout(left) {
                Ok(l) if l.contains(needle) => return Some(l),
                Ok(_) => {}
                Err(_) => return None,
            }
        }
        None
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn killing_real_processes_fails_over() {
    let f = fixture(128, 4);
    let ckpt = s(&f.checkpoint);
    let common = ["--checkpoint", ckpt, "--policy", "fluid", "--heartbeat-ms", "50", "--log", "-"];
    let master = Service::spawn(&[&["serve-master", "--listen", "127.0.0.1:0"][..], &common].concat());
    let worker = Service::spawn(
        &[&["serve-worker", "--connect", &master.addr, "--client-listen", "127.0.0.1:0"][..], &common].concat(),
    );
    assert!(master.wait_for("transition", Duration::from_secs(10)).is_some_and(|l| l.contains("HA_BOTH")));

    let images = &f.test.images.data()[..64 * IMAGE_FLOATS];
    let x = Tensor::new(vec![64, 1, 28, 28], images.to_vec()).unwrap();
    let want = |spec| predict(&f.params, spec, &x).unwrap();
    let labels = |m: Message| match m {
        Message::Result { labels, .. } => labels,
        other => panic!("{other:?}"),
    };
    let client = Client::connect(&master.addr, Duration::from_secs(2)).unwrap();
    assert_eq!(labels(client.infer(1, 64, images, Duration::from_secs(5)).unwrap()), want(SubnetId::W100));

    // SIGKILL the worker process: the master notices the silence and serves W50.
    let mut worker = worker;
    let worker_addr = worker.addr.clone();
    worker.child.kill().unwrap();
    worker.child.wait().unwrap();
    let t = master.wait_for("MASTER_ONLY", Duration::from_secs(3)).expect("master fails over");
    assert!(t.contains("specs=W50"), "{t}");
    assert_eq!(labels(client.infer(2, 64, images, Duration::from_secs(5)).unwrap()), want(SubnetId::W50));

    // Bring a worker back, then SIGKILL the master: the worker serves U50 to redirected clients.
    let worker = Service::spawn(
        &[&["serve-worker", "--connect", &master.addr, "--client-listen", &worker_addr][..], &common].concat(),
    );
    assert!(master.wait_for("HA_BOTH", Duration::from_secs(10)).is_some());
    let mut master = master;
    master.child.kill().unwrap();
    master.child.wait().unwrap();
    assert!(worker.wait_for("WORKER_ONLY", Duration::from_secs(3)).is_some_and(|l| l.contains("specs=U50")));
    let direct = Client::connect(&worker.addr, Duration::from_secs(2)).unwrap();
    match direct.infer(3, 64, images, Duration::from_secs(5)).unwrap() {
        Message::Result { labels, .. } => assert_eq!(labels, want(SubnetId::U50)),
        Message::Error { code, .. } => assert_eq!(code, ErrorCode::Retry, "unexpected error"),
        other => panic!("{other:?}"),
    }
}
