//! Kernel execution behind a pluggable backend.
//!
//! [`MockPose`] is the reference network: a deterministic segment-mean pooling
//! whose output length follows the model's `E / c` law. [`wrap_delay`] turns
//! any backend into an emulated device, edge or cloud accelerator, and
//! [`Accelerator`] serialises all calls in arrival order, the way a single
//! physical device would.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::{Condvar, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock;
use crate::wire::{output_elems, Digest, Dims, ModelDescriptor};

/// A flattened single-precision frame in (N, C, H, W) row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    dims: Dims,
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame holds {actual} values but dims {dims} need {expected}")]
    LengthMismatch {
        dims: Dims,
        expected: u64,
        actual: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

impl Frame {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Frame, FrameError> {
        if data.len() as u64 != dims.elem_count() {
            return Err(FrameError::LengthMismatch {
                dims,
                expected: dims.elem_count(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FrameError::NonFinite(i));
        }
        Ok(Frame { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn elem_count(&self) -> usize {
        self.data.len()
    }

    /// Bitwise equality, so that `-0.0` and `0.0` are told apart.
    pub fn bit_eq(&self, other: &Heatmap) -> bool {
        self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelHandle(pub u64);

impl fmt::Display for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "model#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unknown model handle {0}")]
    UnknownModel(ModelHandle),
    #[error("{elems} inputs with c = {c} give no valid segment-mean output")]
    DegenerateOutput { elems: u64, c: f64 },
}

pub trait Backend: Send + Sync {
    /// Makes a model resident. Registering the same digest again returns the
    /// handle issued the first time.
    fn register_model(&self, descriptor: &ModelDescriptor) -> Result<ModelHandle, BackendError>;

    fn forward(&self, model: ModelHandle, frame: &Frame) -> Result<Heatmap, BackendError>;
}

/// Segment boundaries `floor(j * E / K)` for `j = 0..=K`, computed in exact
/// integer arithmetic.
pub fn segment_bounds(elems: u64, k: u64) -> impl Iterator<Item = u64> {
    (0..=k).map(move |j| ((j as u128 * elems as u128) / k as u128) as u64)
}

/// Per-segment means in double precision, before the final cast.
///
/// Segment `j` covers `[floor(j*E/K), floor((j+1)*E/K))`; sums run left to
/// right.
pub fn segment_means(input: &[f32], k: u64) -> Vec<f64> {
    let bounds: Vec<u64> = segment_bounds(input.len() as u64, k).collect();
    bounds
        .windows(2)
        .map(|w| {
            let seg = &input[w[0] as usize..w[1] as usize];
            let mut sum = 0.0f64;
            for v in seg {
                sum += *v as f64;
            }
            sum / seg.len() as f64
        })
        .collect()
}

/// Reference forward pass: `K = round(E / c)` segment means of the flattened
/// frame.
///
/// Fails with [`BackendError::DegenerateOutput`] when `K` is zero or exceeds
/// `E` (a segment would be empty).
pub fn mockpose_forward(frame: &Frame, c: f64) -> Result<Heatmap, BackendError> {
    let elems = frame.dims().elem_count();
    let k = output_elems(elems, c);
    if k < 1 || k > elems {
        return Err(BackendError::DegenerateOutput { elems, c });
    }
    Ok(Heatmap {
        data: segment_means(frame.data(), k)
            .into_iter()
            .map(|m| m as f32)
            .collect(),
    })
}

pub(crate) fn validate_model(d: &ModelDescriptor) -> Result<(), BackendError> {
    if !(d.c().is_finite() && d.c() > 0.0) {
        return Err(BackendError::InvalidModel(format!(
            "output constant must be positive, got {}",
            d.c()
        )));
    }
    if d.structure().is_empty() {
        return Err(BackendError::InvalidModel("empty structure".into()));
    }
    Ok(())
}

/// In-memory model registry running [`mockpose_forward`].
#[derive(Debug, Default)]
pub struct MockPose {
    models: RwLock<Registry>,
}

#[derive(Debug, Default)]
struct Registry {
    by_digest: HashMap<Digest, ModelHandle>,
    constants: Vec<f64>,
}

impl MockPose {
    pub fn new() -> MockPose {
        MockPose::default()
    }
}

impl Backend for MockPose {
    fn register_model(&self, descriptor: &ModelDescriptor) -> Result<ModelHandle, BackendError> {
        validate_model(descriptor)?;
        let mut reg = self.models.write().unwrap();
        if let Some(h) = reg.by_digest.get(&descriptor.digest()) {
            return Ok(*h);
        }
        let h = ModelHandle(reg.constants.len() as u64);
        reg.constants.push(descriptor.c());
        reg.by_digest.insert(descriptor.digest(), h);
        Ok(h)
    }

    fn forward(&self, model: ModelHandle, frame: &Frame) -> Result<Heatmap, BackendError> {
        let c = {
            let reg = self.models.read().unwrap();
            *reg.constants
                .get(model.0 as usize)
                .ok_or(BackendError::UnknownModel(model))?
        };
        mockpose_forward(frame, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Device,
    Edge,
    Cloud,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Device, Preset::Edge, Preset::Cloud];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Device => "device",
            Preset::Edge => "edge",
            Preset::Cloud => "cloud",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Images,
    Video,
}

impl WorkloadKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Images => "images",
            WorkloadKind::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Option<WorkloadKind> {
        match s {
            "images" => Some(WorkloadKind::Images),
            "video" => Some(WorkloadKind::Video),
            _ => None,
        }
    }
}

/// Emulated accelerator timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub per_frame_compute_s: f64,
    pub model_load_s: f64,
    pub label: String,
}

impl BackendProfile {
    pub fn new(
        label: impl Into<String>,
        per_frame_compute_s: f64,
        model_load_s: f64,
    ) -> Result<BackendProfile, BackendError> {
        for (what, v) in [
            ("per-frame compute", per_frame_compute_s),
            ("model load", model_load_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(BackendError::InvalidModel(format!(
                    "{what} delay must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(BackendProfile {
            per_frame_compute_s,
            model_load_s,
            label: label.into(),
        })
    }

    /// No injected delay at all.
    pub fn none() -> BackendProfile {
        BackendProfile {
            per_frame_compute_s: 0.0,
            model_load_s: 0.0,
            label: "none".into(),
        }
    }

    /// Native per-frame times are the reciprocals of the measured frames per
    /// second on each node; load times are the measured model transfer times.
    pub fn preset(preset: Preset, kind: WorkloadKind) -> BackendProfile {
        let (images, video, load) = match preset {
            Preset::Device => (1.0 / 0.5, 1.0 / 0.4, 6.43),
            Preset::Edge => (1.0 / 1.1, 1.0 / 0.7, 5.937),
            Preset::Cloud => (1.0 / 10.5, 1.0 / 9.0, 1.757),
        };
        let per_frame = match kind {
            WorkloadKind::Images => images,
            WorkloadKind::Video => video,
        };
        BackendProfile {
            per_frame_compute_s: per_frame,
            model_load_s: load,
            label: preset.name().into(),
        }
    }

    /// Accelerator time per frame as profiled while offloading video
    /// (forward pass only, host work excluded).
    pub fn profiled(preset: Preset) -> BackendProfile {
        let (gpu, load) = match preset {
            Preset::Device => (2.5, 6.43),
            Preset::Edge => (1.24, 5.937),
            Preset::Cloud => (0.10, 1.757),
        };
        BackendProfile {
            per_frame_compute_s: gpu,
            model_load_s: load,
            label: format!("{}-profiled", preset.name()),
        }
    }

    pub fn scaled(&self, factor: f64) -> BackendProfile {
        BackendProfile {
            per_frame_compute_s: self.per_frame_compute_s * factor,
            model_load_s: self.model_load_s * factor,
            label: self.label.clone(),
        }
    }
}

/// Backend wrapper that sleeps to emulate accelerator speed.
pub struct Delayed<B> {
    inner: B,
    profile: BackendProfile,
    loaded: Mutex<HashSet<Digest>>,
}

/// Wraps `inner` so that each forward first waits `per_frame_compute_s` and
/// the first registration of each digest waits `model_load_s`.
pub fn wrap_delay<B: Backend>(inner: B, profile: BackendProfile) -> Delayed<B> {
    Delayed {
        inner,
        profile,
        loaded: Mutex::new(HashSet::new()),
    }
}

impl<B> Delayed<B> {
    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }
}

impl<B: Backend> Backend for Delayed<B> {
    fn register_model(&self, descriptor: &ModelDescriptor) -> Result<ModelHandle, BackendError> {
        validate_model(descriptor)?;
        let first = self.loaded.lock().unwrap().insert(descriptor.digest());
        if first {
            clock::sleep_for(clock::secs(self.profile.model_load_s));
        }
        self.inner.register_model(descriptor)
    }

    fn forward(&self, model: ModelHandle, frame: &Frame) -> Result<Heatmap, BackendError> {
        clock::sleep_for(clock::secs(self.profile.per_frame_compute_s));
        self.inner.forward(model, frame)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn register_model(&self, descriptor: &ModelDescriptor) -> Result<ModelHandle, BackendError> {
        (**self).register_model(descriptor)
    }

    fn forward(&self, model: ModelHandle, frame: &Frame) -> Result<Heatmap, BackendError> {
        (**self).forward(model, frame)
    }
}

/// What an accelerator slot was used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobKind {
    Register,
    Forward,
}

/// One entry of the execution log, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecEntry {
    /// Arrival order at the accelerator queue.
    pub ticket: u64,
    /// Caller-supplied owner id (the server uses its session id).
    pub owner: u64,
    pub kind: JobKind,
}

const LOG_CAPACITY: usize = 1 << 16;

/// A backend shared by many callers, executing one call at a time in strict
/// arrival order.
pub struct Accelerator {
    backend: Box<dyn Backend>,
    queue: Mutex<Queue>,
    turn: Condvar,
    log: Mutex<VecDeque<ExecEntry>>,
}

#[derive(Default)]
struct Queue {
    next_ticket: u64,
    serving: u64,
}

struct Turn<'a> {
    acc: &'a Accelerator,
    ticket: u64,
}

impl Drop for Turn<'_> {
    fn drop(&mut self) {
        let mut q = self.acc.queue.lock().unwrap();
        q.serving = self.ticket + 1;
        self.acc.turn.notify_all();
    }
}

impl Accelerator {
    pub fn new(backend: impl Backend + 'static) -> Accelerator {
        Accelerator {
            backend: Box::new(backend),
            queue: Mutex::new(Queue::default()),
            turn: Condvar::new(),
            log: Mutex::new(VecDeque::new()),
        }
    }

    /// MockPose behind the given delay profile.
    pub fn emulated(profile: BackendProfile) -> Accelerator {
        Accelerator::new(wrap_delay(MockPose::new(), profile))
    }

    fn acquire(&self, owner: u64, kind: JobKind) -> Turn<'_> {
        let mut q = self.queue.lock().unwrap();
        let ticket = q.next_ticket;
        q.next_ticket += 1;
        while q.serving != ticket {
            q = self.turn.wait(q).unwrap();
        }
        drop(q);
        let mut log = self.log.lock().unwrap();
        if log.len() == LOG_CAPACITY {
            log.pop_front();
        }
        log.push_back(ExecEntry {
            ticket,
            owner,
            kind,
        });
        Turn { acc: self, ticket }
    }

    pub fn register_model(
        &self,
        owner: u64,
        descriptor: &ModelDescriptor,
    ) -> Result<ModelHandle, BackendError> {
        let _turn = self.acquire(owner, JobKind::Register);
        self.backend.register_model(descriptor)
    }

    /// Runs one forward pass; also returns the seconds spent executing,
    /// excluding time spent queued behind other callers.
    pub fn forward(
        &self,
        owner: u64,
        model: ModelHandle,
        frame: &Frame,
    ) -> Result<(Heatmap, f64), BackendError> {
        let _turn = self.acquire(owner, JobKind::Forward);
        let start = Instant::now();
        let out = self.backend.forward(model, frame)?;
        Ok((out, start.elapsed().as_secs_f64()))
    }

    /// Execution log, oldest first.
    pub fn exec_log(&self) -> Vec<ExecEntry> {
        self.log.lock().unwrap().iter().copied().collect()
    }
}

impl fmt::Debug for Accelerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Accelerator").finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;
    use std::time::Duration;

    use super::*;

    fn frame(data: Vec<f32>) -> Frame {
        let n = data.len() as u32;
        Frame::new(Dims::new(1, 1, 1, n).unwrap(), data).unwrap()
    }

    fn model(c: f64) -> ModelDescriptor {
        ModelDescriptor::new("m", b"layers".to_vec(), vec![1, 2, 3], c)
    }

    #[test]
    fn mockpose_examples() {
        let x: Vec<f32> = (1..=8).map(|v| v as f32).collect();
        assert_eq!(
            mockpose_forward(&frame(x), 2.0).unwrap().data,
            [1.5, 3.5, 5.5, 7.5]
        );
        let x: Vec<f32> = (1..=10).map(|v| v as f32).collect();
        assert_eq!(
            mockpose_forward(&frame(x), 3.0).unwrap().data,
            [2.0, 5.0, 8.5]
        );
    }

    #[test]
    fn constant_input_constant_output() {
        for (e, c) in [(7u32, 2.0), (100, 3.368421), (33, 1.0), (5, 4.9)] {
            let out = mockpose_forward(&frame(vec![7.0; e as usize]), c).unwrap();
            assert!(out.data.iter().all(|v| *v == 7.0));
        }
    }

    #[test]
    fn degenerate_outputs() {
        // K = round(3 / 7) = 0
        assert!(matches!(
            mockpose_forward(&frame(vec![1.0; 3]), 7.0),
            Err(BackendError::DegenerateOutput { elems: 3, .. })
        ));
        // K = 6 > E = 3 would leave empty segments
        assert!(matches!(
            mockpose_forward(&frame(vec![1.0; 3]), 0.5),
            Err(BackendError::DegenerateOutput { .. })
        ));
    }

    #[test]
    fn frame_validation() {
        let dims = Dims::new(1, 1, 2, 2).unwrap();
        assert!(matches!(
            Frame::new(dims, vec![0.0; 3]),
            Err(FrameError::LengthMismatch { .. })
        ));
        assert_eq!(
            Frame::new(dims, vec![0.0, f32::NAN, 0.0, 0.0]),
            Err(FrameError::NonFinite(1))
        );
        assert_eq!(
            Frame::new(dims, vec![0.0, 0.0, f32::INFINITY, 0.0]),
            Err(FrameError::NonFinite(2))
        );
    }

    #[test]
    fn register_idempotent_on_digest() {
        let b = MockPose::new();
        let h1 = b.register_model(&model(2.0)).unwrap();
        let h2 = b.register_model(&model(2.0)).unwrap();
        let h3 = b.register_model(&model(2.5)).unwrap();
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
    }

    #[test]
    fn register_rejects_invalid() {
        let b = MockPose::new();
        for bad in [
            model(0.0),
            model(-1.0),
            model(f64::NAN),
            ModelDescriptor::new("m", vec![], vec![1], 2.0),
        ] {
            assert!(matches!(
                b.register_model(&bad),
                Err(BackendError::InvalidModel(_))
            ));
        }
    }

    #[test]
    fn forward_reference_frame() {
        let b = MockPose::new();
        let h = b.register_model(&model(3.368421)).unwrap();
        let dims = Dims::image(3, 368, 656).unwrap();
        let f = Frame::new(dims, vec![0.25; dims.elem_count() as usize]).unwrap();
        assert_eq!(b.forward(h, &f).unwrap().elem_count(), 215_004);
    }

    #[test]
    fn forward_unknown_handle() {
        let b = MockPose::new();
        assert_eq!(
            b.forward(ModelHandle(3), &frame(vec![1.0])),
            Err(BackendError::UnknownModel(ModelHandle(3)))
        );
    }

    #[test]
    fn zero_delay_wrapper_is_transparent() {
        let plain = MockPose::new();
        let wrapped = wrap_delay(MockPose::new(), BackendProfile::none());
        let m = model(3.0);
        let (a, b) = (
            plain.register_model(&m).unwrap(),
            wrapped.register_model(&m).unwrap(),
        );
        let f = frame((0..99).map(|i| (i as f32).sin()).collect());
        assert!(plain
            .forward(a, &f)
            .unwrap()
            .bit_eq(&wrapped.forward(b, &f).unwrap()));
    }

    #[test]
    fn per_frame_delay_accumulates() {
        let b = wrap_delay(
            MockPose::new(),
            BackendProfile::new("t", 0.01, 0.0).unwrap(),
        );
        let h = b.register_model(&model(2.0)).unwrap();
        let f = frame(vec![1.0; 8]);
        let t = Instant::now();
        for _ in 0..10 {
            b.forward(h, &f).unwrap();
        }
        assert!(t.elapsed() >= Duration::from_millis(100));
    }

    #[test]
    fn cloud_model_load_once_per_digest() {
        let profile = BackendProfile::preset(Preset::Cloud, WorkloadKind::Video);
        assert_eq!(profile.model_load_s, 1.757);
        let b = wrap_delay(MockPose::new(), profile);
        let t = Instant::now();
        b.register_model(&model(2.0)).unwrap();
        assert!(t.elapsed() >= Duration::from_secs_f64(1.757));
        let t = Instant::now();
        b.register_model(&model(2.0)).unwrap();
        assert!(t.elapsed() < Duration::from_millis(100));
    }

    #[test]
    fn presets_are_fps_reciprocals() {
        let p = |pr, k| BackendProfile::preset(pr, k).per_frame_compute_s;
        assert!((p(Preset::Device, WorkloadKind::Images) - 2.0).abs() < 1e-12);
        assert!((p(Preset::Device, WorkloadKind::Video) - 2.5).abs() < 1e-12);
        assert!((p(Preset::Edge, WorkloadKind::Images) - 0.9090909).abs() < 1e-6);
        assert!((p(Preset::Edge, WorkloadKind::Video) - 1.4285714).abs() < 1e-6);
        assert!((p(Preset::Cloud, WorkloadKind::Images) - 0.0952381).abs() < 1e-6);
        assert!((p(Preset::Cloud, WorkloadKind::Video) - 0.1111111).abs() < 1e-6);
        let s = BackendProfile::preset(Preset::Edge, WorkloadKind::Video).scaled(0.01);
        assert!((s.model_load_s - 0.05937).abs() < 1e-12);
    }

    #[test]
    fn profile_rejects_negative() {
        assert!(BackendProfile::new("x", -0.1, 0.0).is_err());
        assert!(BackendProfile::new("x", 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn accelerator_runs_in_arrival_order() {
        let acc = Arc::new(Accelerator::emulated(
            BackendProfile::new("t", 0.002, 0.0).unwrap(),
        ));
        let h = acc.register_model(0, &model(2.0)).unwrap();
        let threads: Vec<_> = (1..=4u64)
            .map(|owner| {
                let acc = Arc::clone(&acc);
                std::thread::spawn(move || {
                    for _ in 0..5 {
                        let (out, exec) = acc
                            .forward(owner, h, &frame(vec![owner as f32; 4]))
                            .unwrap();
                        assert_eq!(out.data, [owner as f32; 2]);
                        assert!(exec >= 0.002);
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        let log = acc.exec_log();
        assert_eq!(log.len(), 21);
        assert!(log.windows(2).all(|w| w[1].ticket == w[0].ticket + 1));
        assert_eq!(
            log.iter().filter(|e| e.kind == JobKind::Forward).count(),
            20
        );
    }
}
