use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use tracing::{error, info};

use accel_offload::backend::{Accelerator, BackendProfile, Preset, WorkloadKind};
use accel_offload::config::KeyValues;
use accel_offload::harness::{self, RunConfig, StressConfig, Workload};
use accel_offload::server::{serve, ServerConfig};

#[derive(Parser)]
#[command(
    name = "accel",
    version,
    about = "Accelerator offload server and benchmark harness"
)]
struct Cli {
    /// Write JSON log lines here instead of stderr.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the destination-node server until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: String,
        /// Emulated accelerator: device, edge, cloud or none.
        #[arg(long, default_value = "none")]
        preset: String,
        /// `profiled` uses measured per-cycle GPU time, `fps` the end-to-end rate.
        #[arg(long, default_value = "profiled")]
        timing: String,
        #[arg(long, default_value = "video")]
        kind: String,
        #[arg(long, default_value_t = harness::DEFAULT_SCALE)]
        scale: f64,
        #[arg(long, default_value_t = 16)]
        max_sessions: usize,
        #[arg(long, default_value_t = 1 << 30)]
        max_model_bytes: u64,
        /// Stop on its own after this many seconds.
        #[arg(long)]
        run_for: Option<f64>,
    },
    /// Write a synthetic workload to disk.
    Gen {
        #[arg(long, default_value = "video")]
        kind: String,
        #[arg(long, default_value_t = 204)]
        count: usize,
        #[arg(long, default_value_t = 656)]
        width: u32,
        #[arg(long, default_value_t = 368)]
        height: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a workload from a key-value config file. `ACCEL_*` variables win
    /// over file values; `--set` wins over both.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two run records written by `run`.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Many concurrent clients against one server, verified bit for bit.
    Stress {
        #[arg(long, default_value_t = 4)]
        clients: usize,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 48)]
        height: u32,
        #[arg(long, default_value = "none")]
        preset: String,
        #[arg(long, default_value_t = harness::DEFAULT_SCALE)]
        scale: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging(cli.log.as_deref()) {
        eprintln!("accel: cannot open log: {e}");
        return ExitCode::FAILURE;
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("accel: {e}");
            ExitCode::FAILURE
        }
    }
}

fn init_logging(path: Option<&std::path::Path>) -> std::io::Result<()> {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt().json().with_env_filter(filter);
    match path {
        Some(p) => builder
            .with_writer(Mutex::new(std::fs::File::create(p)?))
            .init(),
        None => builder.with_writer(std::io::stderr).init(),
    }
    Ok(())
}

type BoxError = Box<dyn std::error::Error>;

fn parse_preset(s: &str) -> Result<Option<Preset>, BoxError> {
    match s {
        "none" => Ok(None),
        _ => Preset::parse(s)
            .map(Some)
            .ok_or_else(|| format!("unknown preset `{s}` (device|edge|cloud|none)").into()),
    }
}

fn parse_kind(s: &str) -> Result<WorkloadKind, BoxError> {
    WorkloadKind::parse(s).ok_or_else(|| format!("unknown workload `{s}` (images|video)").into())
}

fn dispatch(cmd: Cmd) -> Result<(), BoxError> {
    match cmd {
        Cmd::Serve {
            bind,
            preset,
            timing,
            kind,
            scale,
            max_sessions,
            max_model_bytes,
            run_for,
        } => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err("--scale must be positive".into());
            }
            let profile = match (parse_preset(&preset)?, timing.as_str()) {
                (None, _) => BackendProfile::none(),
                (Some(p), "profiled") => BackendProfile::profiled(p),
                (Some(p), "fps") => BackendProfile::preset(p, parse_kind(&kind)?),
                (_, t) => return Err(format!("unknown timing `{t}` (profiled|fps)").into()),
            };
            let server = serve(
                &bind,
                Arc::new(Accelerator::emulated(profile.scaled(scale))),
                ServerConfig::with_limits(max_sessions, max_model_bytes),
            )?;
            println!("listening on {}", server.local_addr());
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))?;
            let deadline = run_for.map(|s| Instant::now() + Duration::from_secs_f64(s.max(0.0)));
            while !stop.load(Ordering::SeqCst) && deadline.is_none_or(|d| Instant::now() < d) {
                std::thread::sleep(Duration::from_millis(50));
            }
            info!("shutting down");
            server.shutdown();
            let stats = server.stats();
            info!(
                accepted = stats.accepted,
                forwards = stats.forwards,
                uploads = stats.uploads,
                "stopped"
            );
            Ok(())
        }
        Cmd::Gen {
            kind,
            count,
            width,
            height,
            seed,
            out,
        } => {
            let w = Workload::new(parse_kind(&kind)?, count, width, height, seed)?;
            let meta = harness::write_workload(&w, &out)?;
            println!(
                "wrote {} frames of {} to {}",
                count,
                w.dims(),
                meta.display()
            );
            Ok(())
        }
        Cmd::Run { config, set, out } => {
            let kv = match &config {
                Some(p) => KeyValues::read(p)?,
                None => KeyValues::default(),
            };
            let mut kv = kv.overlay_env(std::env::vars());
            for pair in &set {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| format!("--set expects KEY=VALUE, got `{pair}`"))?;
                kv.set(k.trim(), v.trim());
            }
            let mut cfg = RunConfig::from_key_values(&kv)?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            let output = harness::run(&cfg)?;
            print!(
                "{}",
                accel_offload::profiler::summary_markdown(&output.record, None)
            );
            println!(
                "output_sha256 {}",
                output
                    .record
                    .meta
                    .get("output_sha256")
                    .map_or("", String::as_str)
            );
            Ok(())
        }
        Cmd::Compare {
            baseline,
            candidate,
            out,
        } => {
            let a = harness::read_record(&baseline)?;
            let b = harness::read_record(&candidate)?;
            let text = harness::compare(&a, &b);
            match out {
                Some(p) => std::fs::write(p, &text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Cmd::Stress {
            clients,
            frames,
            width,
            height,
            preset,
            scale,
        } => {
            let backend = match parse_preset(&preset)? {
                Some(p) => BackendProfile::profiled(p).scaled(scale),
                None => BackendProfile::none(),
            };
            let report = harness::stress(&StressConfig {
                clients,
                frames_per_client: frames,
                width,
                height,
                backend,
                ..StressConfig::default()
            })?;
            for (i, c) in report.clients.iter().enumerate() {
                println!(
                    "client {i}: {} frames, {} mismatches{}",
                    c.frames,
                    c.mismatches,
                    c.error
                        .as_deref()
                        .map(|e| format!(", error: {e}"))
                        .unwrap_or_default()
                );
            }
            println!(
                "accelerator jobs: {}, fifo order: {}",
                report.exec_log.len(),
                report.fifo_in_order()
            );
            if report.all_match() && report.fifo_in_order() {
                Ok(())
            } else {
                Err("stress run found mismatches or errors".into())
            }
        }
    }
}
