//! How a dispatch configuration is resolved: built-in defaults, then the
//! file, then `ACCEL_*` environment variables.
//!
//! ACCEL_SCALE_FACTOR=0.5 cargo run --example config_precedence

use accel_offload::config::{DispatchConfig, KeyValues};

const FILE: &str = "\
# offload to the lab node
mode = remote
endpoint = 127.0.0.1:7070
scale_factor = 0.01
link_delay_s = 0.002
";

fn main() {
    let defaults = DispatchConfig::default();
    println!(
        "defaults:  {:?} scale {}",
        defaults.mode, defaults.scale_factor
    );

    let file = KeyValues::parse(FILE).unwrap();
    let from_file = DispatchConfig::from_key_values(&file).unwrap();
    println!(
        "file:      {:?} {} scale {} link {:.3} s",
        from_file.mode,
        from_file.endpoint.as_deref().unwrap_or("-"),
        from_file.scale_factor,
        from_file.link.one_way_delay_s
    );

    let merged = file.overlay_env(std::env::vars());
    let cfg = DispatchConfig::from_key_values(&merged).unwrap();
    println!("with env:  {:?} scale {}", cfg.mode, cfg.scale_factor);
}
