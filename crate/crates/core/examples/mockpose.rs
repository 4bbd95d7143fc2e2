//! The reference backend on its own: segment means, presets and the delay
//! wrapper.
//!
//! cargo run --example mockpose

use std::time::Instant;

use accel_offload::backend::{
    mockpose_forward, wrap_delay, Backend, BackendProfile, Frame, MockPose, Preset, WorkloadKind,
};
use accel_offload::wire::{Dims, ModelDescriptor};

fn main() {
    let frame = Frame::new(
        Dims::image(1, 1, 10).unwrap(),
        (0..10).map(|i| i as f32).collect(),
    )
    .unwrap();
    let heat = mockpose_forward(&frame, 2.5).unwrap();
    println!("10 inputs, c = 2.5 -> {:?}", heat.data);

    for preset in Preset::ALL {
        let fps = BackendProfile::preset(preset, WorkloadKind::Video);
        let profiled = BackendProfile::profiled(preset);
        println!(
            "{:>6}: {:.4} s/frame end to end, {:.2} s on the accelerator, {:.3} s model load",
            preset.name(),
            fps.per_frame_compute_s,
            profiled.per_frame_compute_s,
            fps.model_load_s
        );
    }

    // the cloud preset at 1/100 scale: 1 ms per frame, 17.57 ms first load
    let backend = wrap_delay(
        MockPose::new(),
        BackendProfile::profiled(Preset::Cloud).scaled(0.01),
    );
    let model = ModelDescriptor::new("demo", b"conv".to_vec(), vec![0; 64], 2.5);
    for attempt in 1..=2 {
        let t = Instant::now();
        backend.register_model(&model).unwrap();
        println!(
            "register #{attempt}: {:.2} ms",
            t.elapsed().as_secs_f64() * 1e3
        );
    }
    let handle = backend.register_model(&model).unwrap();
    let t = Instant::now();
    let delayed = backend.forward(handle, &frame).unwrap();
    println!(
        "delayed forward: {:.2} ms, same output: {}",
        t.elapsed().as_secs_f64() * 1e3,
        delayed.bit_eq(&heat)
    );
}
