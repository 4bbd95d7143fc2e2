//! Encodes the messages of one execution cycle and decodes them back.
//!
//! cargo run --example codec

use accel_offload::wire::{decode, encode, transfer_size, Dims, Message, CYCLE_FRAMING_OVERHEAD};

fn main() {
    let cycle = [
        Message::FrameData {
            data: vec![0.25; 12],
        },
        Message::Resolution { w: 2, h: 2 },
        Message::FrameSize { elem_count: 12 },
        Message::ForwardResult {
            compute_s: 0.1,
            data: vec![0.25; 4],
        },
    ];
    let mut stream = Vec::new();
    for m in &cycle {
        let bytes = encode(m).expect("small message");
        println!(
            "{:>13?}: {:>3} bytes  {:02x?}",
            m.tag(),
            bytes.len(),
            &bytes[..bytes.len().min(13)]
        );
        stream.extend(bytes);
    }

    let mut at = 0;
    while at < stream.len() {
        let (msg, used) = decode(&stream[at..]).expect("well-formed");
        at += used;
        println!("decoded {:?} ({used} bytes)", msg.tag());
    }

    // a truncated stream asks for more bytes rather than guessing
    println!("truncated: {:?}", decode(&stream[..7]).unwrap_err());

    let dims = Dims::image(3, 368, 656).unwrap();
    let payload = transfer_size(dims, 3.368421);
    println!(
        "one 656x368 cycle: {payload} payload bytes, {} on the wire",
        payload + CYCLE_FRAMING_OVERHEAD
    );
}
