//! Several clients share one server and its single accelerator.
//!
//! cargo run --example multi_client

use accel_offload::backend::{BackendProfile, Preset};
use accel_offload::harness::{stress, StressConfig};

fn main() {
    let report = stress(&StressConfig {
        clients: 4,
        frames_per_client: 25,
        backend: BackendProfile::profiled(Preset::Cloud).scaled(0.01),
        ..StressConfig::default()
    })
    .unwrap();
    for (i, c) in report.clients.iter().enumerate() {
        println!(
            "client {i}: {} frames, {} mismatches",
            c.frames, c.mismatches
        );
    }
    let order: String = report
        .exec_log
        .iter()
        .take(24)
        .map(|e| char::from(b'0' + (e.owner % 10) as u8))
        .collect();
    println!("first accelerator jobs by session: {order}...");
    println!("executed in arrival order: {}", report.fifo_in_order());
}
