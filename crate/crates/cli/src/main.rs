//! `sb`: run scenarios, export readings, print reports, serve the gateway.
//!
//! Exit codes: 0 ok, 1 scenario or input error, 2 internal error.

use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use sb_core::building::Scenario;
use sb_core::gateway::{spawn_driver, Server};
use sb_core::platform::{run_scenario, Platform, PlatformConfig, PlatformError};
use sb_core::report::{render_csv, render_text};
use sb_core::store::{RangeQuery, Store};
use sb_core::types::{Timestamp, HOUR_MS, TICK_MS};

#[derive(Parser)]
#[command(name = "sb", version, about = "Simulated smart-building hub")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write CSV exports and the energy report.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 24.0)]
        hours: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-export a range of a readings CSV.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        from: Option<Timestamp>,
        #[arg(long)]
        to: Option<Timestamp>,
        /// Output file, `-` for stdout.
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Simulate a scenario and print the energy report for one room.
    Report {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        room: String,
        #[arg(long)]
        from: Option<Timestamp>,
        #[arg(long)]
        to: Option<Timestamp>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 24.0)]
        hours: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Run a scenario live and accept NDJSON gateway clients.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Simulated ticks per wall-clock tick.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Stop after this many simulated hours.
        #[arg(long)]
        hours: Option<f64>,
    },
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Internal(String),
}

impl From<PlatformError> for Failure {
    fn from(e: PlatformError) -> Self {
        match e {
            PlatformError::Scenario(_) | PlatformError::Topology(_) | PlatformError::Transport(_) => Failure::Input(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn internal(e: impl std::fmt::Display) -> Failure {
    Failure::Internal(e.to_string())
}

/// `SB_SEED` wins over `--seed`.
fn effective_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var("SB_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| Failure::Input(format!("SB_SEED is not an unsigned integer: '{s}'"))),
        Err(_) => Ok(flag),
    }
}

fn ticks_for(hours: f64) -> Result<u64, Failure> {
    if !hours.is_finite() || hours < 0.0 {
        return Err(Failure::Input(format!("hours must be a non-negative number, got {hours}")));
    }
    Ok((hours * HOUR_MS as f64 / TICK_MS as f64).round() as u64)
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Scenario::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run { scenario, seed, hours, out } => {
            let sc = load(&scenario)?;
            let arts = run_scenario(sc, PlatformConfig::new(effective_seed(seed)?), ticks_for(hours)?)?;
            fs::create_dir_all(&out).map_err(internal)?;
            for (name, body) in arts.files() {
                fs::write(out.join(name), body).map_err(internal)?;
            }
            eprintln!("wrote {}", out.display());
        }
        Cmd::Export { input, from, to, out } => {
            let f = fs::File::open(&input).map_err(|e| Failure::Input(format!("{}: {e}", input.display())))?;
            let mut store = Store::new();
            store.import_csv(BufReader::new(f)).map_err(|e| Failure::Input(format!("{}: {e}", input.display())))?;
            let q = RangeQuery::between(from.unwrap_or(Timestamp::MIN), to.unwrap_or(Timestamp::MAX))
                .map_err(|e| Failure::Input(e.to_string()))?;
            let mut buf = Vec::new();
            store.export_csv(&q, &mut buf).map_err(|e| Failure::Input(e.to_string()))?;
            if out.as_os_str() == "-" {
                io::stdout().write_all(&buf).map_err(internal)?;
            } else {
                fs::write(&out, buf).map_err(internal)?;
            }
        }
        Cmd::Report { scenario, room, from, to, seed, hours, format } => {
            let sc = load(&scenario)?;
            let mut p = Platform::new(sc, PlatformConfig::new(effective_seed(seed)?))?;
            p.run(ticks_for(hours)?);
            let from = from.unwrap_or(p.scenario().start);
            let to = to.unwrap_or_else(|| p.clock().timestamp(p.now()));
            let r = p.room_report(&room, from, to).map_err(|e| Failure::Input(e.to_string()))?;
            let body = match format {
                Format::Text => render_text(&[r]),
                Format::Csv => render_csv(&[r]),
            };
            print!("{body}");
        }
        Cmd::Serve { port, scenario, seed, speed, hours } => {
            if !(speed.is_finite() && speed > 0.0) {
                return Err(Failure::Input("speed must be positive".into()));
            }
            let sc = load(&scenario)?;
            let p = Platform::new(sc, PlatformConfig::new(effective_seed(seed)?))?;
            let bus = p.bus();
            let listener = TcpListener::bind(("127.0.0.1", port)).map_err(internal)?;
            let server = Server::start(listener, bus).map_err(internal)?;
            eprintln!("gateway listening on {}", server.addr());
            let tick_wall = Duration::from_secs_f64(TICK_MS as f64 / 1000.0 / speed);
            let max = hours.map(ticks_for).transpose()?;
            let driver = spawn_driver(Arc::new(Mutex::new(p)), tick_wall, max, Arc::new(AtomicBool::new(false)));
            let ran = driver.join().map_err(|_| Failure::Internal("simulation thread panicked".into()))?;
            eprintln!("simulation finished after {ran} ticks");
            server.stop();
            server.join();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
