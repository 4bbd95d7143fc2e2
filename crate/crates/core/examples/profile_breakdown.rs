//! Native run on the device preset against an offload to the cloud preset,
//! with the per-cycle breakdown written as CSV and markdown.
//!
//! cargo run --example profile_breakdown [out-dir]

use std::path::PathBuf;

use accel_offload::backend::{Preset, WorkloadKind};
use accel_offload::harness::{self, emit_report, RunConfig, Workload};
use accel_offload::profiler::breakdown;

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("accel-breakdown"));
    let workload = Workload::new(WorkloadKind::Video, 60, 64, 36, 7).unwrap();

    let native = harness::run(&RunConfig::native(
        "native",
        workload.clone(),
        Preset::Device,
    ))
    .unwrap();
    let offload = harness::run(&RunConfig::offload("cloud", workload, Preset::Cloud)).unwrap();

    let n = offload.record.frame_count() as f64;
    let b = breakdown(&offload.record);
    println!(
        "offload per frame: gpu {:.5} s, communication {:.5} s, other {:.5} s; setup {:.4} s",
        b.gpu_s / n,
        b.communication_s / n,
        b.other_s / n,
        b.setup_s
    );
    emit_report(&native.record, None, &out).unwrap();
    let files = emit_report(&offload.record, Some(&native.record), &out).unwrap();
    println!("{}", std::fs::read_to_string(&files.markdown).unwrap());
    println!("reports in {}", out.display());
}
