//! Speedup and FPS of offloading from the device to the edge and cloud
//! presets, for image and video workloads, at 1/100 time scale.
//!
//! cargo run --release --example speedup_tables

use accel_offload::backend::{Preset, WorkloadKind};
use accel_offload::harness::{self, RunConfig, Workload};
use accel_offload::profiler::speedup;

fn main() {
    println!("| workload | destination | native fps | offload fps | speedup |");
    println!("|---|---|---|---|---|");
    for kind in [WorkloadKind::Images, WorkloadKind::Video] {
        let workload = Workload::new(kind, 40, 64, 36, 5).unwrap();
        let native = harness::run(&RunConfig::native(
            "native",
            workload.clone(),
            Preset::Device,
        ))
        .unwrap()
        .record;
        for dest in [Preset::Edge, Preset::Cloud] {
            // profiled accelerator time, matching link delay and host work
            let cfg = RunConfig::offload(dest.name(), workload.clone(), dest);
            let offload = harness::run(&cfg).unwrap().record;
            let s = speedup(native.processing_s(), offload.processing_s()).unwrap();
            println!(
                "| {} | {} | {:.1} | {:.1} | {:.2}x |",
                kind.name(),
                dest.name(),
                native.fps().unwrap(),
                offload.fps().unwrap(),
                s.ratio()
            );
        }
    }
}
