//! Benchmark harness: synthetic workloads, native and offloaded runs under
//! emulated accelerators and links, and report emission.
//!
//! Unscaled times (backend presets, host work per frame, link presets)
//! are multiplied by a scale factor, 0.01 by default, so a 2.5 s forward
//! pass becomes 25 ms. Explicit link delays are taken as real seconds.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use tracing::info;

use crate::backend::{
    mockpose_forward, Accelerator, BackendProfile, ExecEntry, Frame, Heatmap, Preset, WorkloadKind,
};
use crate::client::{connect, CacheOutcome, ClientError, Dispatcher, ModelSync, SessionOptions};
use crate::clock;
use crate::config::{self, ConfigError, KeyValues};
use crate::profiler::{self, Run, RunMode, RunRecord};
use crate::server::{serve, ServerConfig, ServerError, ServerStats};
use crate::wire::{transfer_size, Dims, ModelDescriptor, CYCLE_FRAMING_OVERHEAD};

pub use crate::transport::{emulate_link, EmulatedLink, LinkProfile};

/// Output constant of the pose model the presets were measured with.
pub const POSE_MODEL_C: f64 = 3.368421;

/// Host-side work per offloaded frame, in unscaled seconds: the gap between a
/// full offloaded frame (2.5 s / 7.48) and its 0.15 s execution cycle.
pub const HOST_OTHER_S: f64 = 0.18;

pub const DEFAULT_SCALE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: ClientError },
    #[error("setup: {0}")]
    Setup(ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Profiler(#[from] profiler::ProfilerError),
    #[error("bad record file: {0}")]
    Record(#[from] serde_json::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// A deterministic synthetic image or video workload.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Workload {
    pub fn new(
        kind: WorkloadKind,
        count: usize,
        width: u32,
        height: u32,
        seed: u64,
    ) -> Result<Workload, HarnessError> {
        if count < 1 {
            return Err(HarnessError::Workload("count must be at least 1".into()));
        }
        Dims::image(3, height, width).map_err(|e| HarnessError::Workload(e.to_string()))?;
        Ok(Workload {
            kind,
            count,
            width,
            height,
            seed,
        })
    }

    /// 204 frames of 656×368, like the reference video clip.
    pub fn reference_video(seed: u64) -> Workload {
        Workload::new(WorkloadKind::Video, 204, 656, 368, seed).expect("valid")
    }

    pub fn dims(&self) -> Dims {
        Dims::image(3, self.height, self.width).expect("validated")
    }

    /// Frame `index`: ChaCha8 seeded with `seed`, stream `index`, one `f32`
    /// in [0, 1) per element.
    pub fn frame(&self, index: usize) -> Frame {
        let dims = self.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let data = (0..dims.elem_count()).map(|_| rng.gen::<f32>()).collect();
        Frame::new(dims, data).expect("finite by construction")
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.count).map(|i| self.frame(i))
    }
}

/// Materialises every frame of the workload.
pub fn gen_frames(workload: &Workload) -> Vec<Frame> {
    workload.frames().collect()
}

/// Writes `frames.f32` (raw little-endian floats, frame after frame) and
/// `workload.json` (parameters plus per-frame SHA-256) under `dir`.
pub fn write_workload(workload: &Workload, dir: &Path) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(dir)?;
    let data_path = dir.join("frames.f32");
    let mut out = io::BufWriter::new(fs::File::create(&data_path)?);
    let mut digests = Vec::with_capacity(workload.count);
    for frame in workload.frames() {
        let bytes: Vec<u8> = frame.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        digests.push(hex::encode(Sha256::digest(&bytes)));
        io::Write::write_all(&mut out, &bytes)?;
    }
    io::Write::flush(&mut out)?;
    let meta = serde_json::json!({
        "workload": workload,
        "dims": workload.dims().to_string(),
        "generator": "chacha8, seed_from_u64(seed), stream = frame index, f32 in [0,1)",
        "frame_sha256": digests,
    });
    let meta_path = dir.join("workload.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("json") + "\n",
    )?;
    Ok(meta_path)
}

/// Synthetic model blobs of the requested sizes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub structure_bytes: usize,
    pub weights_bytes: usize,
    pub c: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            name: "pose-net".into(),
            structure_bytes: 4096,
            weights_bytes: 1 << 20,
            c: POSE_MODEL_C,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn descriptor(&self) -> ModelDescriptor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut structure = format!("name: \"{}\"\n", self.name).into_bytes();
        structure.resize(self.structure_bytes.max(1), b'#');
        let mut weights = vec![0u8; self.weights_bytes];
        rng.fill(&mut weights[..]);
        ModelDescriptor::new(self.name.clone(), structure, weights, self.c)
    }
}

/// Per-frame link emulation matching the profiled communication overhead:
/// a cycle pays two one-way delays.
pub fn link_preset(destination: Preset) -> LinkProfile {
    let per_cycle = match destination {
        Preset::Device => 0.0,
        Preset::Edge => 0.24,
        Preset::Cloud => 0.05,
    };
    LinkProfile::new(format!("to-{}", destination.name()), per_cycle / 2.0, None)
        .expect("valid preset")
}

pub fn scale_link(link: &LinkProfile, factor: f64) -> LinkProfile {
    LinkProfile {
        one_way_delay_s: link.one_way_delay_s * factor,
        bandwidth_bytes_per_s: link.bandwidth_bytes_per_s.map(|b| b / factor),
        label: link.label.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub label: String,
    pub workload: Workload,
    pub mode: RunMode,
    /// Accelerator timing in unscaled seconds; scaled by `scale_factor`.
    pub backend: BackendProfile,
    pub scale_factor: f64,
    /// Host-side work per frame in unscaled seconds; scaled by `scale_factor`.
    pub host_other_s: f64,
    /// Applied as-is (real seconds) to offloaded sessions.
    pub link: LinkProfile,
    pub model: ModelSpec,
    /// Offload target; `None` spawns a loopback server.
    pub endpoint: Option<String>,
    pub server: ServerConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn native(label: impl Into<String>, workload: Workload, node: Preset) -> RunConfig {
        let backend = BackendProfile::preset(node, workload.kind);
        RunConfig {
            label: label.into(),
            workload,
            mode: RunMode::Native,
            backend,
            scale_factor: DEFAULT_SCALE,
            host_other_s: 0.0,
            link: LinkProfile::ideal(),
            model: ModelSpec::default(),
            endpoint: None,
            server: ServerConfig::default(),
            out_dir: None,
        }
    }

    /// Offload to a profiled destination with matching link emulation and
    /// the default host work per frame.
    pub fn offload(label: impl Into<String>, workload: Workload, destination: Preset) -> RunConfig {
        RunConfig {
            mode: RunMode::Offload,
            backend: BackendProfile::profiled(destination),
            host_other_s: HOST_OTHER_S,
            link: scale_link(&link_preset(destination), DEFAULT_SCALE),
            ..RunConfig::native(label, workload, destination)
        }
    }

    /// Reads a flat key-value run description (see the README for keys).
    pub fn from_key_values(kv: &KeyValues) -> Result<RunConfig, HarnessError> {
        let mode = match kv.get_str("mode").unwrap_or("native") {
            "native" | "local" => RunMode::Native,
            "offload" | "remote" => RunMode::Offload,
            other => {
                return Err(config::value_err("mode", format!("unknown mode `{other}`")).into())
            }
        };
        let kind = config::parse_kind(kv, "workload_kind")?.unwrap_or(WorkloadKind::Video);
        let workload = Workload::new(
            kind,
            kv.get_or("count", 204usize)?,
            kv.get_or("width", 656u32)?,
            kv.get_or("height", 368u32)?,
            kv.get_or("seed", 7u64)?,
        )?;
        let scale_factor = kv.positive("scale_factor", DEFAULT_SCALE)?;
        let preset = config::parse_preset(kv, "preset")?;
        let mut backend = match (preset, kv.get_str("backend_timing").unwrap_or("fps")) {
            (None, _) => BackendProfile::none(),
            (Some(p), "fps") => BackendProfile::preset(p, kind),
            (Some(p), "profiled") => BackendProfile::profiled(p),
            (_, other) => {
                return Err(config::value_err(
                    "backend_timing",
                    format!("unknown timing `{other}` (fps|profiled)"),
                )
                .into())
            }
        };
        if let Some(v) = kv.get::<f64>("per_frame_compute_s")? {
            backend = BackendProfile::new(backend.label, v, backend.model_load_s)
                .map_err(|e| config::value_err("per_frame_compute_s", e.to_string()))?;
        }
        if let Some(v) = kv.get::<f64>("model_load_s")? {
            backend = BackendProfile::new(backend.label, backend.per_frame_compute_s, v)
                .map_err(|e| config::value_err("model_load_s", e.to_string()))?;
        }
        let default_other = match mode {
            RunMode::Native => 0.0,
            RunMode::Offload => HOST_OTHER_S,
        };
        let link = match kv.get_str("link") {
            Some("none") | None if kv.get_str("link_delay_s").is_some() => config::parse_link(kv)?,
            Some("none") | None => LinkProfile::ideal(),
            Some(name) => {
                let p = Preset::parse(name)
                    .ok_or_else(|| config::value_err("link", format!("unknown link `{name}`")))?;
                scale_link(&link_preset(p), scale_factor)
            }
        };
        let d = ModelSpec::default();
        let model = ModelSpec {
            name: kv.get_str("model_name").unwrap_or(&d.name).to_string(),
            structure_bytes: kv.get_or("model_structure_bytes", d.structure_bytes)?,
            weights_bytes: kv.get_or("model_weights_bytes", d.weights_bytes)?,
            c: kv.positive("model_c", d.c)?,
            seed: kv.get_or("model_seed", d.seed)?,
        };
        let mut server = ServerConfig::default();
        server.max_model_bytes = kv.get_or("max_model_bytes", server.max_model_bytes)?;
        Ok(RunConfig {
            label: kv.get_str("label").unwrap_or(mode.name()).to_string(),
            workload,
            mode,
            backend,
            scale_factor,
            host_other_s: kv.non_negative("host_other_s", default_other)?,
            link,
            model,
            endpoint: kv.get_str("endpoint").map(str::to_string),
            server,
            out_dir: kv.get_str("out").map(PathBuf::from),
        })
    }

    fn scaled_backend(&self) -> BackendProfile {
        self.backend.scaled(self.scale_factor)
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub model_sync: ModelSync,
    /// Stats of the spawned loopback server, if one was used.
    pub server_stats: Option<ServerStats>,
    pub exec_log: Vec<ExecEntry>,
}

pub fn run(config: &RunConfig) -> Result<RunOutput, HarnessError> {
    run_observed(config, |_, _, _| {})
}

/// Runs the workload, handing every (index, frame, heatmap) to `observe`.
/// Frame synthesis and observation are excluded from the measured time.
pub fn run_observed<F>(config: &RunConfig, mut observe: F) -> Result<RunOutput, HarnessError>
where
    F: FnMut(usize, &Frame, &Heatmap),
{
    let backend = config.scaled_backend();
    let descriptor = config.model.descriptor();
    let dims = config.workload.dims();
    let host_other = clock::secs(config.host_other_s * config.scale_factor);

    let server = match (config.mode, &config.endpoint) {
        (RunMode::Offload, None) => Some(serve(
            "127.0.0.1:0",
            Arc::new(Accelerator::emulated(backend.clone())),
            config.server.clone(),
        )?),
        _ => None,
    };
    let destination = match config.mode {
        RunMode::Native => "host".to_string(),
        RunMode::Offload => backend.label.clone(),
    };
    let mut run = Run::start(&config.label, config.mode, "host", destination);

    let run_start = Instant::now();
    let mut excluded = 0.0f64;
    let setup_start = Instant::now();
    let mut dispatcher = match config.mode {
        RunMode::Native => Dispatcher::local(Arc::new(Accelerator::emulated(backend.clone()))),
        RunMode::Offload => {
            let endpoint = match (&config.endpoint, &server) {
                (Some(e), _) => e.clone(),
                (None, Some(s)) => s.local_addr().to_string(),
                (None, None) => unreachable!("server spawned for offload without endpoint"),
            };
            let opts = SessionOptions {
                link: config.link.clone(),
                ..SessionOptions::default()
            };
            Dispatcher::remote(connect(&endpoint, &opts).map_err(HarnessError::Setup)?)
        }
    };
    let model_sync = dispatcher
        .load_model(&descriptor)
        .map_err(HarnessError::Setup)?;
    run.add_setup(setup_start.elapsed().as_secs_f64())?;

    let mut outputs = Sha256::new();
    for index in 0..config.workload.count {
        let gen = Instant::now();
        let frame = config.workload.frame(index);
        excluded += gen.elapsed().as_secs_f64();

        let start = Instant::now();
        clock::sleep_for(host_other);
        let (heatmap, mut timing) =
            dispatcher
                .forward(&frame)
                .map_err(|source| HarnessError::Frame {
                    frame: index,
                    source,
                })?;
        let wall = start.elapsed().as_secs_f64();
        timing.other_s = (wall - timing.gpu_s - timing.communication_s).max(0.0);
        run.record(timing)?;

        let obs = Instant::now();
        for v in &heatmap.data {
            outputs.update(v.to_bits().to_le_bytes());
        }
        observe(index, &frame, &heatmap);
        excluded += obs.elapsed().as_secs_f64();
    }
    let total_wall_s = run_start.elapsed().as_secs_f64() - excluded;
    dispatcher.close();

    run.set_meta(
        "workload",
        format!(
            "{} x{} seed {}",
            config.workload.kind.name(),
            config.workload.count,
            config.workload.seed
        ),
    );
    run.set_meta("frame_dims", dims);
    run.set_meta("scale_factor", config.scale_factor);
    run.set_meta(
        "backend",
        format!(
            "{} ({:.6} s/frame, {:.6} s load, scaled)",
            backend.label, backend.per_frame_compute_s, backend.model_load_s
        ),
    );
    run.set_meta("host_other_s", format!("{:.6}", host_other.as_secs_f64()));
    if config.mode == RunMode::Offload {
        run.set_meta(
            "link",
            format!(
                "{} ({:.6} s one-way, {})",
                config.link.label,
                config.link.one_way_delay_s,
                config
                    .link
                    .bandwidth_bytes_per_s
                    .map_or("unlimited".to_string(), |b| format!("{b} B/s"))
            ),
        );
        run.set_meta(
            "bytes_per_cycle",
            transfer_size(dims, descriptor.c()) + CYCLE_FRAMING_OVERHEAD,
        );
    }
    run.set_meta(
        "model",
        format!(
            "{} c={} {}",
            descriptor.name(),
            descriptor.c(),
            descriptor.digest()
        ),
    );
    run.set_meta("model_transfer", format!("{:?}", model_sync.outcome));
    run.set_meta("output_sha256", hex::encode(outputs.finalize()));
    let record = run.finalize(total_wall_s)?;

    if config.mode == RunMode::Offload {
        let expected = transfer_size(dims, descriptor.c()) + CYCLE_FRAMING_OVERHEAD;
        if let Some(i) = record
            .cycles
            .iter()
            .position(|c| c.bytes_sent + c.bytes_received != expected)
        {
            return Err(HarnessError::Invariant(format!(
                "cycle {i} moved {} bytes, expected {expected}",
                record.cycles[i].bytes_sent + record.cycles[i].bytes_received
            )));
        }
    }
    if let Some(dir) = &config.out_dir {
        emit_report(&record, None, dir)?;
    }
    let (server_stats, exec_log) = match &server {
        Some(s) => (Some(s.stats()), s.exec_log()),
        None => (None, Vec::new()),
    };
    if let Some(s) = &server {
        s.shutdown();
    }
    info!(label = %record.label, frames = record.frame_count(), wall = record.total_wall_s, "run finished");
    Ok(RunOutput {
        record,
        model_sync,
        server_stats,
        exec_log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub record: PathBuf,
}

/// Writes `<label>.cycles.csv`, `<label>.summary.md` and
/// `<label>.record.json` under `dir`.
pub fn emit_report(
    record: &RunRecord,
    baseline: Option<&RunRecord>,
    dir: &Path,
) -> Result<ReportFiles, HarnessError> {
    fs::create_dir_all(dir)?;
    let files = ReportFiles {
        csv: dir.join(format!("{}.cycles.csv", record.label)),
        markdown: dir.join(format!("{}.summary.md", record.label)),
        record: dir.join(format!("{}.record.json", record.label)),
    };
    fs::write(&files.csv, profiler::cycles_csv(record))?;
    fs::write(
        &files.markdown,
        profiler::summary_markdown(record, baseline),
    )?;
    fs::write(&files.record, record.to_json() + "\n")?;
    Ok(files)
}

pub fn read_record(path: &Path) -> Result<RunRecord, HarnessError> {
    Ok(RunRecord::from_json(&fs::read_to_string(path)?)?)
}

/// Markdown comparison of `candidate` against `baseline`.
pub fn compare(baseline: &RunRecord, candidate: &RunRecord) -> String {
    profiler::summary_markdown(candidate, Some(baseline))
}

/// Checks that a record's breakdown adds up to its wall time.
pub fn check_decomposition(record: &RunRecord, tolerance: f64) -> Result<(), HarnessError> {
    let b = profiler::breakdown(record);
    if b.relative_residual() > tolerance {
        return Err(HarnessError::Invariant(format!(
            "{}: components sum to {:.6} s but wall time is {:.6} s",
            record.label,
            b.component_sum(),
            b.total_s
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StressConfig {
    pub clients: usize,
    pub frames_per_client: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Already scaled.
    pub backend: BackendProfile,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            clients: 4,
            frames_per_client: 50,
            width: 64,
            height: 48,
            seed: 1,
            backend: BackendProfile::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub frames: usize,
    pub mismatches: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StressReport {
    pub clients: Vec<ClientOutcome>,
    pub exec_log: Vec<ExecEntry>,
    pub stats: ServerStats,
}

impl StressReport {
    /// The accelerator ran every job in ticket order with no gaps.
    pub fn fifo_in_order(&self) -> bool {
        self.exec_log
            .windows(2)
            .all(|w| w[1].ticket == w[0].ticket + 1)
    }

    pub fn all_match(&self) -> bool {
        self.clients
            .iter()
            .all(|c| c.error.is_none() && c.mismatches == 0)
    }
}

/// N clients, each with its own model and frames, against one spawned
/// server. Every returned heatmap is checked against a local MockPose run.
pub fn stress(config: &StressConfig) -> Result<StressReport, HarnessError> {
    let server = serve(
        "127.0.0.1:0",
        Arc::new(Accelerator::emulated(config.backend.clone())),
        ServerConfig {
            max_sessions: config.clients.max(1),
            ..ServerConfig::default()
        },
    )?;
    let endpoint = server.local_addr().to_string();
    let threads: Vec<_> = (0..config.clients)
        .map(|i| {
            let endpoint = endpoint.clone();
            let workload = Workload::new(
                WorkloadKind::Images,
                config.frames_per_client,
                config.width,
                config.height,
                config.seed.wrapping_add(i as u64 * 7919),
            );
            let model = ModelSpec {
                name: format!("client-{i}"),
                structure_bytes: 64,
                weights_bytes: 256,
                c: 2.0 + 0.75 * i as f64,
                seed: i as u64,
            };
            std::thread::spawn(move || stress_client(&endpoint, workload, model))
        })
        .collect();
    let clients = threads
        .into_iter()
        .map(|t| {
            t.join().unwrap_or_else(|_| ClientOutcome {
                frames: 0,
                mismatches: 0,
                error: Some("client thread panicked".into()),
            })
        })
        .collect();
    let report = StressReport {
        clients,
        exec_log: server.exec_log(),
        stats: server.stats(),
    };
    server.shutdown();
    Ok(report)
}

fn stress_client(
    endpoint: &str,
    workload: Result<Workload, HarnessError>,
    model: ModelSpec,
) -> ClientOutcome {
    let mut outcome = ClientOutcome {
        frames: 0,
        mismatches: 0,
        error: None,
    };
    let result = (|| -> Result<(), String> {
        let workload = workload.map_err(|e| e.to_string())?;
        let descriptor = model.descriptor();
        let mut session =
            connect(endpoint, &SessionOptions::default()).map_err(|e| e.to_string())?;
        let sync = session
            .ensure_model(&descriptor)
            .map_err(|e| e.to_string())?;
        if sync.outcome != CacheOutcome::Uploaded {
            return Err(format!("fresh model reported {:?}", sync.outcome));
        }
        for frame in workload.frames() {
            let (remote, _) = session.remote_forward(&frame).map_err(|e| e.to_string())?;
            let local = mockpose_forward(&frame, descriptor.c()).map_err(|e| e.to_string())?;
            outcome.frames += 1;
            if !remote.bit_eq(&local) {
                outcome.mismatches += 1;
            }
        }
        session.close();
        Ok(())
    })();
    outcome.error = result.err();
    outcome
}
