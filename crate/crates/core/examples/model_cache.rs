//! Model upload happens once per server; later sessions only send a digest.
//!
//! cargo run --example model_cache

use std::sync::Arc;

use accel_offload::backend::{Accelerator, BackendProfile, Preset};
use accel_offload::client::{connect, SessionOptions};
use accel_offload::harness::ModelSpec;
use accel_offload::server::{serve, ServerConfig};

fn main() {
    // the edge node takes ~5.9 s to load a model; at 1/100 scale, 59 ms
    let accel = Accelerator::emulated(BackendProfile::profiled(Preset::Edge).scaled(0.01));
    let server = serve("127.0.0.1:0", Arc::new(accel), ServerConfig::default()).unwrap();
    let endpoint = server.local_addr().to_string();
    let model = ModelSpec {
        weights_bytes: 8 << 20,
        ..ModelSpec::default()
    }
    .descriptor();
    println!("model {} ({} bytes)", model.digest(), model.content_len());

    for session in 1..=3 {
        let mut s = connect(&endpoint, &SessionOptions::default()).unwrap();
        let t = std::time::Instant::now();
        let sync = s.ensure_model(&model).unwrap();
        println!(
            "session {session}: {:?}, sent {} bytes, received {}, {:.1} ms",
            sync.outcome,
            sync.bytes_sent,
            sync.bytes_received,
            t.elapsed().as_secs_f64() * 1e3
        );
    }
    let stats = server.stats();
    println!(
        "server: {} upload(s), {} cache hit(s)",
        stats.uploads, stats.cache_hits
    );
    server.shutdown();
}
