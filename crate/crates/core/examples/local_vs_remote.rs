//! The same application code run locally and against a loopback server.
//! Only the configuration text differs.
//!
//! cargo run --example local_vs_remote

use std::sync::Arc;

use accel_offload::backend::{Accelerator, BackendProfile};
use accel_offload::client::Dispatcher;
use accel_offload::config::{DispatchConfig, KeyValues};
use accel_offload::harness::{ModelSpec, Workload};
use accel_offload::server::{serve, ServerConfig};
use accel_offload::WorkloadKind;

fn application(cfg: &DispatchConfig) -> Vec<u32> {
    let mut dispatcher = Dispatcher::from_config(cfg).expect("destination reachable");
    dispatcher
        .load_model(&ModelSpec::default().descriptor())
        .unwrap();
    let workload = Workload::new(WorkloadKind::Video, 5, 64, 48, 1).unwrap();
    let mut firsts = Vec::new();
    for frame in workload.frames() {
        let (heatmap, timing) = dispatcher.forward(&frame).unwrap();
        println!(
            "  {} outputs, gpu {:.6} s, comm {:.6} s, {} bytes",
            heatmap.elem_count(),
            timing.gpu_s,
            timing.communication_s,
            timing.bytes_sent + timing.bytes_received
        );
        firsts.push(heatmap.data[0].to_bits());
    }
    dispatcher.close();
    firsts
}

fn main() {
    let server = serve(
        "127.0.0.1:0",
        Arc::new(Accelerator::emulated(BackendProfile::none())),
        ServerConfig::default(),
    )
    .unwrap();

    let local = KeyValues::parse("mode = local").unwrap();
    let remote = KeyValues::parse(&format!(
        "mode = remote\nendpoint = {}",
        server.local_addr()
    ))
    .unwrap();

    println!("local:");
    let a = application(&DispatchConfig::from_key_values(&local).unwrap());
    println!("remote:");
    let b = application(&DispatchConfig::from_key_values(&remote).unwrap());
    println!("bit-identical: {}", a == b);
    server.shutdown();
}
