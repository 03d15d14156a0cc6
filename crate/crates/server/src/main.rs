use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use seldinger_core::calibration::{self, FitOptions};
use seldinger_core::mechanism::DeviceConfig;
use seldinger_core::PhantomModel;
use seldinger_server::log::SessionLog;
use seldinger_server::replay::replay;
use seldinger_server::script::{run_script, RunOptions, Script};
use seldinger_server::serve::{serve, ServeOptions};
use seldinger_server::session::Session;

#[derive(Parser)]
#[command(name = "seldinger", version, about = "Robotic femoral-access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve one operator over WebSocket.
    Serve {
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Session log written on exit.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        no_frames: bool,
    },
    /// Fit calibration parameters to a sweep log.
    Calibrate {
        #[arg(long)]
        sweep: PathBuf,
        /// Known lateral image scale, px/mm.
        #[arg(long)]
        x_scale: f64,
        #[arg(long)]
        out: PathBuf,
        /// Huber-weighted fit.
        #[arg(long)]
        robust: bool,
    },
    /// Write a simulated calibration sweep for a device config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixel noise standard deviation.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 10)]
        n_l: usize,
        #[arg(long, default_value_t = 10)]
        n_theta: usize,
    },
    /// Run a script headlessly.
    RunScript {
        script: PathBuf,
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        log: PathBuf,
        /// Directory for sidecar PGM frames.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        frame_every: u64,
        /// Drop tweak clicks from the script.
        #[arg(long)]
        no_tweak: bool,
    },
    /// Re-run a session log and compare state hashes.
    Replay {
        log: PathBuf,
        #[arg(long)]
        phantom: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_phantom(path: &Path) -> Result<PhantomModel> {
    PhantomModel::from_json(&read(path)?).with_context(|| format!("phantom {}", path.display()))
}

fn load_config(path: &Path) -> Result<DeviceConfig> {
    DeviceConfig::from_json(&read(path)?).with_context(|| format!("device config {}", path.display()))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Serve { phantom, config, port, seed, host, log, no_frames } => {
            let session = Session::new(load_phantom(&phantom)?, load_config(&config)?, seed)?;
            let listener = TcpListener::bind((host.as_str(), port)).with_context(|| format!("binding {host}:{port}"))?;
            ::log::info!("listening on ws://{}", listener.local_addr()?);
            let opts = ServeOptions { frames: !no_frames, log_path: log, ..ServeOptions::default() };
            let stop = opts.stop.clone();
            ctrlc::set_handler(move || stop.store(true, Ordering::Relaxed)).context("installing signal handler")?;
            serve(listener, session, &opts)?;
            Ok(true)
        }
        Command::Calibrate { sweep, x_scale, out, robust } => {
            let samples = calibration::parse_sweep_log(&read(&sweep)?)?;
            let opts = if robust { FitOptions::robust() } else { FitOptions::default() };
            let (params, report) = calibration::fit_with(&samples, x_scale, None, &opts)?;
            std::fs::write(&out, serde_json::to_string_pretty(&params)? + "\n")?;
            print_json(&report)?;
            Ok(report.converged)
        }
        Command::Sweep { config, out, seed, noise, n_l, n_theta } => {
            let cfg = load_config(&config)?;
            let plan = calibration::plan_sweep(&cfg.limits, n_l, n_theta)?;
            let frame = cfg.imaging.frame;
            // only tips visible in the frame are observed
            let samples: Vec<_> = calibration::simulate_sweep(&cfg.true_params(), &plan, noise, seed)
                .into_iter()
                .filter(|s| frame.contains(s.u, s.v))
                .collect();
            ::log::info!("{} of {} sweep poses visible", samples.len(), plan.len());
            std::fs::write(&out, calibration::write_sweep_log(&samples, Some(&cfg.imaging.frame)))?;
            Ok(true)
        }
        Command::RunScript { script, phantom, config, seed, log, frames, frame_every, no_tweak } => {
            let mut s = Script::from_json(&read(&script)?)?;
            if no_tweak {
                s = s.without_tweak();
            }
            let opts = RunOptions { frames_dir: frames, frame_every };
            let run = run_script(&s, load_phantom(&phantom)?, load_config(&config)?, seed, &opts)?;
            std::fs::write(&log, run.log.to_text())?;
            for (step, reason) in &run.rejections {
                eprintln!("step {step}: rejected: {reason}");
            }
            if let Some(step) = run.timed_out {
                eprintln!("step {step}: wait timed out, session aborted");
            }
            #[derive(Serialize)]
            struct Summary<'a> {
                phase: seldinger_core::procedure::Phase,
                outcome: &'a Option<seldinger_core::procedure::Outcome>,
                ticks: u64,
                digest: String,
            }
            print_json(&Summary { phase: run.final_phase, outcome: &run.outcome, ticks: run.ticks, digest: run.log.digest() })?;
            Ok(run.outcome.is_some_and(|o| o.success))
        }
        Command::Replay { log, phantom, config } => {
            let parsed = SessionLog::parse(&read(&log)?)?;
            let phantom = phantom.as_deref().map(load_phantom).transpose()?;
            let config = config.as_deref().map(load_config).transpose()?;
            let report = replay(&parsed, phantom.as_ref(), config.as_ref())?;
            print_json(&report)?;
            if let Some(d) = &report.divergence {
                eprintln!("diverged at tick {} ({})", d.tick, d.record);
            }
            Ok(report.matches())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
