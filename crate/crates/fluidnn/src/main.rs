use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fluidnn::error::{HarnessError, Result};
use fluidnn::report::render;
use fluidnn::{bench, emit_report, format_table, parse_scenario, Harness, Settings};
use fluidnn_core::data::{load_checkpoint, load_mnist, save_checkpoint, Split};
use fluidnn_core::model::{init_params, SubnetId};
use fluidnn_core::train::{evaluate, nested_incremental_train_with};
use fluidnn_runtime::{start_master, start_worker, EventLog};

#[derive(Parser)]
#[command(name = "fluidnn", version, about = "Train, serve and stress-test fluid width-sliced networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any setting, e.g. `--set heartbeat_ms=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    mnist: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Nested incremental training; writes a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<String>,
        /// Training log CSV.
        #[arg(long)]
        log: Option<String>,
        #[arg(long)]
        iters: Option<String>,
        #[arg(long)]
        lr: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        /// Use only the first N training images.
        #[arg(long)]
        limit: Option<String>,
    },
    /// Test accuracy of every sub-network, or one.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        spec: Option<SubnetId>,
    },
    ServeMaster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        heartbeat_ms: Option<String>,
        /// Log destination: a path, `-` for stderr, empty for none.
        #[arg(long)]
        log: Option<String>,
    },
    ServeWorker {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        connect: Option<String>,
        #[arg(long)]
        client_listen: Option<String>,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        heartbeat_ms: Option<String>,
        #[arg(long)]
        log: Option<String>,
    },
    /// Replay a fault-injection script and write windowed metrics.
    RunScenario {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        /// `emulated` or `socket`.
        #[arg(long)]
        transport: Option<String>,
        /// Report file; stdout if omitted.
        #[arg(long)]
        out: Option<String>,
        /// `csv` or `json-lines`.
        #[arg(long)]
        format: Option<String>,
    },
    /// Every policy with both devices, only the master and only the worker.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        /// Number of test images per scenario.
        #[arg(long)]
        images: Option<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<String>,
    },
}

fn settings(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<Settings> {
    let mut s = Settings::default();
    if let Ok(dir) = std::env::var("FLUIDNN_MNIST") {
        s.mnist_dir = dir.into();
    }
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((k.trim(), v.trim()));
    }
    if let Some(m) = &common.mnist {
        pairs.push(("mnist_dir", m));
    }
    pairs.extend(flags.iter().filter_map(|(k, v)| v.as_deref().map(|v| (*k, v))));
    s.apply_overrides(pairs)?;
    Ok(s)
}

fn checkpoint(s: &Settings) -> Result<PathBuf> {
    s.runtime
        .checkpoint
        .clone()
        .ok_or_else(|| HarnessError::Usage("a checkpoint is required (--checkpoint or `checkpoint = ...`)".into()))
}

fn announce(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, out, log, iters, lr, seed, limit } => {
            let s = settings(
                &common,
                &[("out", &out), ("train_log", &log), ("n_iters", &iters), ("learning_rate", &lr), ("seed", &seed), ("train_limit", &limit)],
            )?;
            let out = s.out.clone().ok_or_else(|| HarnessError::Usage("train needs --out".into()))?;
            let mut train = load_mnist(&s.mnist_dir, Split::Train)?;
            if let Some(n) = s.train_limit.filter(|&n| n < train.len()) {
                train = train.take(n)?;
            }
            let test = load_mnist(&s.mnist_dir, Split::Test)?;
            let mut params = init_params(s.schedule.seed);
            let result = nested_incremental_train_with(&mut params, &train, Some(&test), &s.schedule, |e| {
                eprintln!(
                    "iter {} {:<4} loss {:.4} acc {:.4} t {:.1}s",
                    e.iteration,
                    e.spec,
                    e.final_loss.unwrap_or(f64::NAN),
                    e.test_accuracy.unwrap_or(f64::NAN),
                    e.elapsed_s
                );
            });
            let (log, failure) = match result {
                Ok(log) => (log, None),
                Err(f) => (f.log, Some(f.source)),
            };
            if let Some(path) = &s.train_log {
                std::fs::write(path, log.to_csv())?;
            }
            if let Some(e) = failure {
                return Err(e.into());
            }
            save_checkpoint(&params, &out)?;
            for id in SubnetId::ALL {
                if let Some(a) = log.final_accuracy(id) {
                    announce(format!("{id} {a:.4}"));
                }
            }
            announce(format!("wrote {} in {:.1}s", out.display(), log.wall_time_s));
        }
        Cmd::Eval { common, checkpoint: ckpt, spec } => {
            let s = settings(&common, &[("checkpoint", &ckpt)])?;
            let params = load_checkpoint(&checkpoint(&s)?)?;
            let test = load_mnist(&s.mnist_dir, Split::Test)?;
            let specs: Vec<SubnetId> = spec.map_or_else(|| SubnetId::ALL.to_vec(), |id| vec![id]);
            for id in specs {
                announce(format!("{id} {:.4}", evaluate(&params, &id.spec(), &test)?));
            }
        }
        Cmd::ServeMaster { common, listen, checkpoint: ckpt, policy, mode, heartbeat_ms, log } => {
            let s = settings(
                &common,
                &[("listen", &listen), ("checkpoint", &ckpt), ("policy", &policy), ("mode", &mode), ("heartbeat_ms", &heartbeat_ms), ("log", &log)],
            )?;
            let params = load_checkpoint(&checkpoint(&s)?)?;
            let events = EventLog::from_target(&s.runtime.log)?;
            let handle = start_master(s.runtime.clone(), params, events)?;
            announce(format!("master listening on {}", handle.addr));
            handle.join()?;
        }
        Cmd::ServeWorker { common, connect, client_listen, checkpoint: ckpt, policy, heartbeat_ms, log } => {
            let s = settings(
                &common,
                &[("connect", &connect), ("client_listen", &client_listen), ("checkpoint", &ckpt), ("policy", &policy), ("heartbeat_ms", &heartbeat_ms), ("log", &log)],
            )?;
            let params = load_checkpoint(&checkpoint(&s)?)?;
            let events = EventLog::from_target(&s.runtime.log)?;
            let handle = start_worker(s.runtime.clone(), params, events)?;
            announce(format!("worker serving clients on {}", handle.client_addr));
            handle.join()?;
        }
        Cmd::RunScenario { scenario, common, checkpoint: ckpt, policy, mode, transport, out, format } => {
            let s = settings(
                &common,
                &[("checkpoint", &ckpt), ("policy", &policy), ("mode", &mode), ("transport", &transport), ("out", &out), ("format", &format)],
            )?;
            let script = parse_scenario(&std::fs::read_to_string(&scenario)?)?;
            let params = load_checkpoint(&checkpoint(&s)?)?;
            let data = fluidnn::run::load_source(&script, &s.mnist_dir)?;
            let mut h = Harness::new(params, data);
            let run = h.run_scenario(&script, s.runtime.policy, s.runtime.mode, &s.transport())?;
            for a in &run.report.states {
                eprintln!(
                    "{:<12} {:>8.0} ms {:>6} images {:>9.1} img/s accuracy {}",
                    a.state,
                    a.duration_ms,
                    a.images,
                    a.steady_ips.unwrap_or(a.throughput_ips),
                    a.accuracy.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
                );
            }
            match &s.out {
                Some(path) => emit_report(&run.report, path, s.format)?,
                None => print!("{}", render(&run.report, s.format)),
            }
        }
        Cmd::Bench { common, checkpoint: ckpt, images, out } => {
            let s = settings(&common, &[("checkpoint", &ckpt), ("images", &images), ("out", &out)])?;
            let params = load_checkpoint(&checkpoint(&s)?)?;
            let mut data = load_mnist(&s.mnist_dir, Split::Test)?;
            if let Some(n) = s.images.filter(|&n| n < data.len()) {
                data = data.take(n)?;
            }
            let mut h = Harness::new(params, data);
            let rows = bench(&mut h, &s.emu_config(), None)?;
            print!("{}", format_table(&rows));
            if let Some(path) = &s.out {
                std::fs::write(path, fluidnn::bench::to_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fluidnn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
