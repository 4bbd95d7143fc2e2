//! Run-level timing aggregation and reporting.
//!
//! Cycle time splits into GPU (backend execution), communication (time on
//! the wire, including waiting for the destination minus its compute time)
//! and other (host-side work). Model transfer and load is tracked separately
//! as setup time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Mul;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::CycleTiming;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfilerError {
    #[error("run is already finalized")]
    RunClosed,
    #[error("time must be positive")]
    NonPositiveTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Native,
    Offload,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Native => "native",
            RunMode::Offload => "offload",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub gpu_s: f64,
    pub communication_s: f64,
    pub other_s: f64,
    pub setup_s: f64,
    pub total_s: f64,
}

impl Breakdown {
    pub fn component_sum(&self) -> f64 {
        self.gpu_s + self.communication_s + self.other_s + self.setup_s
    }

    /// |components − total| / total, or 0 for an empty run.
    pub fn relative_residual(&self) -> f64 {
        if self.total_s == 0.0 {
            return self.component_sum().abs();
        }
        (self.component_sum() - self.total_s).abs() / self.total_s
    }
}

/// A finalized, immutable run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub mode: RunMode,
    pub host: String,
    pub destination: String,
    pub cycles: Vec<CycleTiming>,
    pub setup_s: f64,
    pub total_wall_s: f64,
    /// Free-form run parameters (workload, scale factor, digests).
    pub meta: BTreeMap<String, String>,
    totals: Breakdown,
}

impl RunRecord {
    pub fn frame_count(&self) -> usize {
        self.cycles.len()
    }

    /// Wall time spent processing frames, setup excluded.
    pub fn processing_s(&self) -> f64 {
        (self.total_wall_s - self.setup_s).max(0.0)
    }

    pub fn bytes_transferred(&self) -> u64 {
        self.cycles
            .iter()
            .map(|c| c.bytes_sent + c.bytes_received)
            .sum()
    }

    /// Frames per second over the processing time.
    pub fn fps(&self) -> Result<f64, ProfilerError> {
        fps(self.frame_count(), self.processing_s())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<RunRecord, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// An open run accepting cycle timings.
#[derive(Debug)]
pub struct Run {
    label: String,
    mode: RunMode,
    host: String,
    destination: String,
    cycles: Vec<CycleTiming>,
    setup_s: f64,
    sums: Breakdown,
    meta: BTreeMap<String, String>,
    closed: bool,
}

impl Run {
    pub fn start(
        label: impl Into<String>,
        mode: RunMode,
        host: impl Into<String>,
        destination: impl Into<String>,
    ) -> Run {
        Run {
            label: label.into(),
            mode,
            host: host.into(),
            destination: destination.into(),
            cycles: Vec::new(),
            setup_s: 0.0,
            sums: Breakdown::default(),
            meta: BTreeMap::new(),
            closed: false,
        }
    }

    pub fn record(&mut self, cycle: CycleTiming) -> Result<(), ProfilerError> {
        if self.closed {
            return Err(ProfilerError::RunClosed);
        }
        self.sums.gpu_s += cycle.gpu_s;
        self.sums.communication_s += cycle.communication_s;
        self.sums.other_s += cycle.other_s;
        self.cycles.push(cycle);
        Ok(())
    }

    pub fn add_setup(&mut self, seconds: f64) -> Result<(), ProfilerError> {
        if self.closed {
            return Err(ProfilerError::RunClosed);
        }
        self.setup_s += seconds;
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn frame_count(&self) -> usize {
        self.cycles.len()
    }

    /// Closes the run. Later `record` calls fail with `RunClosed`.
    pub fn finalize(&mut self, total_wall_s: f64) -> Result<RunRecord, ProfilerError> {
        if self.closed {
            return Err(ProfilerError::RunClosed);
        }
        self.closed = true;
        let mut totals = self.sums;
        totals.setup_s = self.setup_s;
        totals.total_s = total_wall_s;
        Ok(RunRecord {
            label: std::mem::take(&mut self.label),
            mode: self.mode,
            host: std::mem::take(&mut self.host),
            destination: std::mem::take(&mut self.destination),
            cycles: std::mem::take(&mut self.cycles),
            setup_s: self.setup_s,
            total_wall_s,
            meta: std::mem::take(&mut self.meta),
            totals,
        })
    }
}

pub fn breakdown(run: &RunRecord) -> Breakdown {
    run.totals
}

/// Native time over offloaded time, kept as the pair so that composition is
/// exact: `speedup(a, b) * speedup(b, a)` has ratio exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub native_s: f64,
    pub offload_s: f64,
}

impl Speedup {
    pub fn ratio(&self) -> f64 {
        self.native_s / self.offload_s
    }
}

impl Mul for Speedup {
    type Output = Speedup;
    fn mul(self, rhs: Speedup) -> Speedup {
        Speedup {
            native_s: self.native_s * rhs.native_s,
            offload_s: self.offload_s * rhs.offload_s,
        }
    }
}

pub fn speedup(native_total_s: f64, offload_total_s: f64) -> Result<Speedup, ProfilerError> {
    if !(native_total_s > 0.0 && offload_total_s > 0.0) {
        return Err(ProfilerError::NonPositiveTime);
    }
    Ok(Speedup {
        native_s: native_total_s,
        offload_s: offload_total_s,
    })
}

pub fn fps(frame_count: usize, wall_s: f64) -> Result<f64, ProfilerError> {
    if wall_s.is_nan() || wall_s <= 0.0 {
        return Err(ProfilerError::NonPositiveTime);
    }
    Ok(frame_count as f64 / wall_s)
}

/// One CSV row per cycle.
pub fn cycles_csv(run: &RunRecord) -> String {
    let mut out = String::from("index,gpu_s,communication_s,other_s,bytes_sent,bytes_received\n");
    for (i, c) in run.cycles.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{:.9},{:.9},{:.9},{},{}",
            c.gpu_s, c.communication_s, c.other_s, c.bytes_sent, c.bytes_received
        );
    }
    out
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// Markdown summary: breakdown, FPS and, given a baseline, the speedup over
/// it measured on processing time.
pub fn summary_markdown(run: &RunRecord, baseline: Option<&RunRecord>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run `{}`\n", run.label);
    for (k, v) in &run.meta {
        let _ = writeln!(out, "- {k}: {v}");
    }
    if !run.meta.is_empty() {
        out.push('\n');
    }
    out.push_str("| run | mode | host | destination | frames | setup_s | gpu_s | communication_s | other_s | total_s | fps | bytes | speedup |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    let mut row = |r: &RunRecord, speed: Option<f64>| {
        let b = breakdown(r);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {} | {} | {} |",
            r.label,
            r.mode.name(),
            r.host,
            r.destination,
            r.frame_count(),
            b.setup_s,
            b.gpu_s,
            b.communication_s,
            b.other_s,
            b.total_s,
            fmt_opt(r.fps().ok(), 3),
            r.bytes_transferred(),
            speed.map_or_else(|| "-".to_string(), |s| format!("{s:.2}x")),
        );
    };
    if let Some(base) = baseline {
        row(base, Some(1.0));
    }
    let speed = baseline.and_then(|base| {
        speedup(base.processing_s(), run.processing_s())
            .ok()
            .map(|s| s.ratio())
    });
    row(run, speed);
    let frames = run.frame_count().max(1) as f64;
    let b = breakdown(run);
    let _ = writeln!(
        out,
        "\nPer frame: gpu {:.6} s, communication {:.6} s, other {:.6} s.",
        b.gpu_s / frames,
        b.communication_s / frames,
        b.other_s / frames
    );
    out
}
