//! Communication time per cycle under different emulated links.
//!
//! cargo run --example link_emulation

use std::sync::Arc;

use accel_offload::backend::{Accelerator, BackendProfile};
use accel_offload::client::{connect, SessionOptions};
use accel_offload::harness::{ModelSpec, Workload};
use accel_offload::server::{serve, ServerConfig};
use accel_offload::transport::LinkProfile;

fn main() {
    let server = serve(
        "127.0.0.1:0",
        Arc::new(Accelerator::emulated(BackendProfile::none())),
        ServerConfig::default(),
    )
    .unwrap();
    let workload = Workload::reference_video(3);
    let frame = workload.frame(0);
    let links = [
        LinkProfile::ideal(),
        LinkProfile::new("10 ms", 0.010, None).unwrap(),
        LinkProfile::new("100 MB/s", 0.0, Some(100e6)).unwrap(),
        LinkProfile::new("wan", 0.020, Some(12.5e6)).unwrap(),
    ];
    for link in links {
        let opts = SessionOptions {
            link: link.clone(),
            ..SessionOptions::default()
        };
        let mut s = connect(&server.local_addr().to_string(), &opts).unwrap();
        s.ensure_model(&ModelSpec::default().descriptor()).unwrap();
        let (_, t) = s.remote_forward(&frame).unwrap();
        println!(
            "{:>9}: {} bytes, communication {:.4} s",
            link.label,
            t.bytes_sent + t.bytes_received,
            t.communication_s
        );
    }
    server.shutdown();
}
