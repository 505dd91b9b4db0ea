//! `ergoswarm`: run, validate and export scenarios, serve live sessions and
//! replay their command logs.
//!
//! Every flag can also be set from the environment as `ERGOSWARM_<FLAG>`,
//! e.g. `ERGOSWARM_PORT=9000`. Machine-readable results go to stdout as a
//! single JSON document; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (including a
//! missing input file), 3 invalid input (scenario, log or range).

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ergoswarm_core::engine::{Engine, RunSummary};
use ergoswarm_core::par::Execution;
use ergoswarm_core::runlog::{grid_to_base64, JsonlWriter, RunLog};
use ergoswarm_core::scenario::ScenarioScript;
use ergoswarm_gateway::{CommandLog, Session, SessionConfig};
use serde::Serialize;

pub const DEFAULT_PORT: u16 = 8740;

/// Live sessions started without a scenario run this long.
const OPEN_ENDED_TICKS: u64 = 1_000_000_000;

#[derive(Parser)]
#[command(name = "ergoswarm", version, about = "Decentralized ergodic swarm coverage: scenarios, exports and live sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion and write its log.
    Run {
        #[arg(long, env = "ERGOSWARM_SCRIPT")]
        script: PathBuf,
        /// Override the script's seed.
        #[arg(long, env = "ERGOSWARM_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "ERGOSWARM_OUT", default_value = "out")]
        out: PathBuf,
        /// Step agents on one thread.
        #[arg(long, env = "ERGOSWARM_SEQUENTIAL")]
        sequential: bool,
    },
    /// Check a scenario without running it.
    Validate {
        #[arg(long, env = "ERGOSWARM_SCRIPT")]
        script: PathBuf,
    },
    /// Turn a run log into plot-ready tables.
    Export {
        #[arg(long, env = "ERGOSWARM_RUN_LOG")]
        log: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
        /// Tick for reconstruction exports; defaults to the last one.
        #[arg(long)]
        tick: Option<u64>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Output file; stdout if omitted.
        #[arg(long, env = "ERGOSWARM_OUT")]
        out: Option<PathBuf>,
    },
    /// Serve a live session over websockets.
    Serve {
        #[arg(long, env = "ERGOSWARM_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "ERGOSWARM_PORT", default_value_t = DEFAULT_PORT, value_parser = clap::value_parser!(u16).range(1..))]
        port: u16,
        /// Ticks per second; 0 runs unthrottled.
        #[arg(long, env = "ERGOSWARM_PACE", default_value_t = 10.0)]
        pace: f64,
        /// Scenario to start from; an empty world with 8 agents otherwise.
        #[arg(long, env = "ERGOSWARM_SCENARIO")]
        scenario: Option<PathBuf>,
        #[arg(long, env = "ERGOSWARM_DECIMATION", default_value_t = ergoswarm_gateway::DEFAULT_DECIMATION, value_parser = clap::value_parser!(u64).range(1..))]
        decimation: u64,
        #[arg(long, env = "ERGOSWARM_MAX_TICKS")]
        max_ticks: Option<u64>,
        /// Shut down once the session reaches its last tick.
        #[arg(long, env = "ERGOSWARM_EXIT_ON_FINISH")]
        exit_on_finish: bool,
        /// Where to write `run.jsonl` and `commands.json`.
        #[arg(long, env = "ERGOSWARM_OUT", default_value = "out")]
        out: PathBuf,
        /// Replay a command log headlessly instead of serving.
        #[arg(long, env = "ERGOSWARM_REPLAY")]
        replay: Option<PathBuf>,
    },
    /// Reproduce a live session from its command log.
    Replay {
        #[arg(long, env = "ERGOSWARM_REPLAY")]
        commands: PathBuf,
        #[arg(long, env = "ERGOSWARM_OUT", default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Metric,
    Trajectories,
    Reconstruction,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Invalid(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ergoswarm_core::error::Error> for Failure {
    fn from(e: ergoswarm_core::error::Error) -> Self {
        use ergoswarm_core::error::Error as E;
        match e {
            E::Validation(errs) => Failure::Invalid(errs.join("\n")),
            E::Parse(_) | E::Range(_) | E::Contract(_) | E::DegenerateTarget(_) | E::Shape(_) => Failure::Invalid(e.to_string()),
            E::Io(_) | E::NumericalFault(_) => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ergoswarm_gateway::Error> for Failure {
    fn from(e: ergoswarm_gateway::Error) -> Self {
        match e {
            ergoswarm_gateway::Error::Core(c) => c.into(),
            ergoswarm_gateway::Error::Parse(m) | ergoswarm_gateway::Error::Config(m) => Failure::Invalid(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ERGOSWARM_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { script, seed, out, sequential } => cmd_run(&script, seed, &out, sequential),
        Command::Validate { script } => cmd_validate(&script),
        Command::Export { log, what, tick, width, height, out } => cmd_export(&log, what, tick, width, height, out.as_deref()),
        Command::Serve { replay: Some(path), out, .. } => cmd_replay(&path, &out),
        Command::Serve { host, port, pace, scenario, decimation, max_ticks, exit_on_finish, out, replay: None } => {
            cmd_serve(&host, port, pace, scenario.as_deref(), decimation, max_ticks, exit_on_finish, &out)
        }
        Command::Replay { commands, out } => cmd_replay(&commands, &out),
    };
    match result {
        Ok(doc) => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&doc).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such file", path.display())))
    }
}

fn load_script(path: &Path) -> Result<ScenarioScript, Failure> {
    require_file(path)?;
    let script = ScenarioScript::from_path(path).map_err(|e| match e {
        ergoswarm_core::error::Error::Parse(m) => Failure::Invalid(format!("{}: {m}", path.display())),
        other => other.into(),
    })?;
    let errs = script.validate();
    if errs.is_empty() {
        Ok(script)
    } else {
        Err(Failure::Invalid(errs.iter().map(|e| format!("{}: {e}", path.display())).collect::<Vec<_>>().join("\n")))
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Failure> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunReport<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    digest: String,
    log: PathBuf,
}

fn report(summary: &RunSummary, digest: String, log: PathBuf, out: &Path) -> Outcome {
    let doc = serde_json::to_value(RunReport { summary, digest, log }).map_err(|e| Failure::Runtime(e.to_string()))?;
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap_or_default() + "\n")
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(doc)
}

fn cmd_run(script: &Path, seed: Option<u64>, out: &Path, sequential: bool) -> Outcome {
    let mut s = load_script(script)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    create_dir(out)?;
    let log_path = out.join("run.jsonl");
    let mut writer = JsonlWriter::new(create_file(&log_path)?);
    let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
    let summary = Engine::new(s)?.with_execution(exec).run_to_end(&mut writer)?;
    let digest = writer.finish()?;
    report(&summary, digest, log_path, out)
}

fn cmd_validate(script: &Path) -> Outcome {
    let s = load_script(script)?;
    Ok(serde_json::json!({
        "valid": true,
        "scenario": s.name,
        "num_agents": s.num_agents,
        "duration_ticks": s.duration_ticks,
        "events": s.events.len(),
    }))
}

fn cmd_export(log: &Path, what: ExportKind, tick: Option<u64>, width: usize, height: usize, out: Option<&Path>) -> Outcome {
    require_file(log)?;
    let run = RunLog::read(log)?;
    let (text, rows) = match what {
        ExportKind::Metric => {
            let mut s = String::from("tick,raw,normalized\n");
            let series = run.metric_series();
            for (t, raw, norm) in &series {
                let _ = writeln!(s, "{t},{raw:e},{norm:e}");
            }
            (s, series.len())
        }
        ExportKind::Trajectories => {
            let mut s = String::from("agent,tick,x,y\n");
            let mut rows = 0;
            for (agent, trace) in run.trajectories()?.iter().enumerate() {
                for (t, p) in trace {
                    let _ = writeln!(s, "{agent},{t},{},{}", p[0], p[1]);
                    rows += 1;
                }
            }
            (s, rows)
        }
        ExportKind::Reconstruction => {
            let last = run.ticks().last().map(|t| t.tick).unwrap_or(0);
            let tick = tick.unwrap_or(last);
            let grid = run.reconstruction_at(tick, width, height)?;
            let doc = serde_json::json!({
                "tick": tick,
                "width": grid.width(),
                "height": grid.height(),
                "data": grid_to_base64(grid.values()),
            });
            (serde_json::to_string(&doc).unwrap_or_default() + "\n", 1)
        }
    };
    match out {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Ok(serde_json::json!({ "out": path, "rows": rows }))
        }
        None => {
            // the data itself is the machine-readable output
            print!("{text}");
            std::process::exit(0);
        }
    }
}

fn cmd_replay(commands: &Path, out: &Path) -> Outcome {
    require_file(commands)?;
    let log = CommandLog::read(commands)?;
    create_dir(out)?;
    let log_path = out.join("run.jsonl");
    let mut writer = JsonlWriter::new(create_file(&log_path)?);
    let summary = log.replay(&mut writer)?;
    let digest = writer.finish()?;
    report(&summary, digest, log_path, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_serve(
    host: &str,
    port: u16,
    pace: f64,
    scenario: Option<&Path>,
    decimation: u64,
    max_ticks: Option<u64>,
    exit_on_finish: bool,
    out: &Path,
) -> Outcome {
    if !(pace.is_finite() && pace >= 0.0) {
        return Err(Failure::Usage(format!("--pace must be finite and >= 0, got {pace}")));
    }
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Failure::Usage(format!("bad address {host}:{port}: {e}")))?;
    let script = match scenario {
        Some(p) => load_script(p)?,
        None => ScenarioScript::new(0, 8, OPEN_ENDED_TICKS),
    };
    create_dir(out)?;
    let log_path = out.join("run.jsonl");
    let mut config = SessionConfig::new(script);
    config.pace = pace;
    config.decimation = decimation;
    config.max_ticks = max_ticks;
    config.log_path = Some(log_path.clone());

    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Runtime(format!("cannot listen on {addr}: {e}")))?;
        let session = Session::spawn(config)?;
        let bound = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        eprintln!("listening on ws://{bound}/ws (health: http://{bound}/health)");
        let watch = session.clone();
        let stop = async move {
            if exit_on_finish {
                tokio::select! {
                    _ = watch.finished() => {}
                    _ = tokio::signal::ctrl_c() => {}
                }
            } else {
                let _ = tokio::signal::ctrl_c().await;
            }
        };
        ergoswarm_gateway::serve(listener, session.clone(), stop)
            .await
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        let outcome = session.shutdown().await?;
        let commands = out.join("commands.json");
        outcome.command_log.write(&commands)?;
        let mut doc = report(&outcome.summary, outcome.digest, log_path, out)?;
        doc["commands"] = serde_json::to_value(&commands).unwrap_or_default();
        Ok(doc)
    })
}
