use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rovermesh::ground_station::server::GatewayServer;
use rovermesh::scenario::{self, parse_scenario, RunOptions, ServeOptions, Simulation, Verdict};

#[derive(Parser)]
#[command(name = "rovermesh", version, about = "Multi-rover exploration and mesh network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario headless, or interactively with --serve.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Serve the operator gateway on this TCP port.
        #[arg(long)]
        serve: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Simulated seconds per wall-clock second in serve mode.
        #[arg(long, default_value_t = 1.0)]
        realtime_factor: f64,
        #[arg(long, default_value_t = 5.0)]
        snapshot_hz: f64,
        /// Start paused in serve mode.
        #[arg(long)]
        paused: bool,
        /// Write the metrics log here.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Overrides the scenario duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Show ground truth to operator consoles.
        #[arg(long)]
        omniscient: bool,
        /// Turn the ground station bandwidth monitor off.
        #[arg(long)]
        no_monitoring: bool,
    },
    /// Re-run a logged scenario and compare it line by line.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Cmd::Run {
            scenario,
            seed,
            serve,
            bind,
            realtime_factor,
            snapshot_hz,
            paused,
            metrics_out,
            duration,
            omniscient,
            no_monitoring,
        } => {
            let text = fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let mut spec = parse_scenario(&text).with_context(|| format!("{}", scenario.display()))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(d) = duration {
                spec.duration_s = d;
                spec.events.retain(|e| e.at() <= d);
            }
            anyhow::ensure!(realtime_factor > 0.0 && snapshot_hz > 0.0, "rates must be positive");
            let options = RunOptions { monitoring: !no_monitoring, omniscient };
            let sim = Simulation::new(spec, options)?;
            let log = match serve {
                None => sim.run(),
                Some(port) => {
                    let server = GatewayServer::bind(&format!("{bind}:{port}"))
                        .with_context(|| format!("binding {bind}:{port}"))?;
                    eprintln!("gateway listening on {}", server.local_addr());
                    let opts = ServeOptions { realtime_factor, snapshot_hz, start_paused: paused, ..Default::default() };
                    scenario::serve(sim, &server, &opts)
                }
            };
            if let Some(path) = metrics_out {
                fs::write(&path, log.to_text()).with_context(|| format!("writing {}", path.display()))?;
            }
            let summary = log.summary().unwrap_or_default();
            println!(
                "coverage {:.4}  wire_bytes {}  commands {}  checksum {}",
                summary["coverage"].as_f64().unwrap_or(0.0),
                summary["wire_bytes"],
                summary["commands_sent"],
                log.checksum().unwrap_or("-"),
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Replay { log } => {
            let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            match scenario::replay(&text)? {
                Verdict::Identical { checksum } => {
                    println!("identical {checksum}");
                    Ok(ExitCode::SUCCESS)
                }
                Verdict::Diverged { line, recorded, replayed } => {
                    println!("diverged at line {line}");
                    println!("  recorded: {recorded}");
                    println!("  replayed: {replayed}");
                    Ok(ExitCode::from(1))
                }
            }
        }
    }
}
