//! Client and server talking over real loopback sockets.

use std::io::Write;
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use accel_offload::backend::{mockpose_forward, Accelerator, BackendProfile, Frame, MockPose};
use accel_offload::client::{connect, CacheOutcome, ClientError, Dispatcher, SessionOptions};
use accel_offload::config::{DispatchConfig, DispatchMode, KeyValues};
use accel_offload::server::{serve, RunningServer, ServerConfig};
use accel_offload::transport::LinkProfile;
use accel_offload::wire::{
    encode, transfer_size, Dims, ErrorCode, FrameReader, Message, ModelDescriptor,
    CYCLE_FRAMING_OVERHEAD,
};

fn start(profile: BackendProfile, config: ServerConfig) -> RunningServer {
    serve(
        "127.0.0.1:0",
        Arc::new(Accelerator::emulated(profile)),
        config,
    )
    .unwrap()
}

fn addr(s: &RunningServer) -> String {
    s.local_addr().to_string()
}

fn model(c: f64, weights: usize) -> ModelDescriptor {
    ModelDescriptor::new(
        "test-net",
        b"layer { type: conv }".to_vec(),
        (0..weights).map(|i| (i * 31 % 251) as u8).collect(),
        c,
    )
}

fn frame(h: u32, w: u32, salt: u32) -> Frame {
    let dims = Dims::image(3, h, w).unwrap();
    let data = (0..dims.elem_count() as u32)
        .map(|i| ((i.wrapping_mul(2_654_435_761) ^ salt) % 1000) as f32 / 1000.0)
        .collect();
    Frame::new(dims, data).unwrap()
}

#[test]
fn remote_forward_matches_local() {
    let server = start(BackendProfile::none(), ServerConfig::default());
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    let m = model(3.368421, 100);
    s.ensure_model(&m).unwrap();
    for salt in 0..5 {
        let f = frame(8, 12, salt);
        let (remote, _) = s.remote_forward(&f).unwrap();
        assert!(remote.bit_eq(&mockpose_forward(&f, m.c()).unwrap()));
    }
    s.close();
    server.shutdown();
}

#[test]
fn version_mismatch_is_reported() {
    let server = start(
        BackendProfile::none(),
        ServerConfig {
            protocol_version: 2,
            ..ServerConfig::default()
        },
    );
    let err = connect(&addr(&server), &SessionOptions::default()).unwrap_err();
    assert!(
        matches!(err, ClientError::VersionMismatch { ours: 1, theirs: 2 }),
        "{err:?}"
    );
}

#[test]
fn fifth_client_is_busy() {
    let server = start(
        BackendProfile::none(),
        ServerConfig::with_limits(4, 1 << 20),
    );
    let sessions: Vec<_> = (0..4)
        .map(|_| connect(&addr(&server), &SessionOptions::default()).unwrap())
        .collect();
    let err = connect(&addr(&server), &SessionOptions::default()).unwrap_err();
    assert_eq!(err.remote_code(), Some(ErrorCode::Busy), "{err:?}");
    assert_eq!(server.stats().rejected_busy, 1);
    drop(sessions);
    // slots free up once the sessions are gone
    let deadline = Instant::now() + Duration::from_secs(5);
    while server.stats().active_sessions > 0 && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(10));
    }
    assert!(connect(&addr(&server), &SessionOptions::default()).is_ok());
}

#[test]
fn oversized_model_is_refused() {
    let server = start(BackendProfile::none(), ServerConfig::with_limits(4, 1000));
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    let err = s.ensure_model(&model(2.0, 5000)).unwrap_err();
    assert_eq!(err.remote_code(), Some(ErrorCode::TooLarge), "{err:?}");
    assert!(s.is_closed());
    assert_eq!(server.context().store().len(), 0);
}

#[test]
fn model_cache_byte_counts() {
    let server = start(BackendProfile::none(), ServerConfig::default());
    let m = model(3.368421, 1 << 20);
    let upload_len = encode(&Message::ModelUpload(m.to_upload())).unwrap().len() as u64;

    let mut first = connect(&addr(&server), &SessionOptions::default()).unwrap();
    let sync = first.ensure_model(&m).unwrap();
    assert_eq!(sync.outcome, CacheOutcome::Uploaded);
    // ModelCheck, then the upload; ModelNeeded and ModelAck back
    assert_eq!(sync.bytes_sent, 37 + upload_len);
    assert_eq!(sync.bytes_received, 37 + 37);
    assert!(sync.bytes_sent >= 1 << 20);
    first.close();

    let mut second = connect(&addr(&server), &SessionOptions::default()).unwrap();
    let sync = second.ensure_model(&m).unwrap();
    assert_eq!(sync.outcome, CacheOutcome::CacheHit);
    assert_eq!(sync.bytes_sent, 37);
    assert_eq!(sync.bytes_received, 37);
    assert_eq!(server.stats().uploads, 1);
    assert_eq!(server.stats().cache_hits, 1);
}

#[test]
fn cycle_bytes_follow_the_transfer_formula() {
    let server = start(BackendProfile::none(), ServerConfig::default());
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    for (c, h, w) in [(3.368421, 16, 20), (1.0, 3, 3), (7.5, 40, 33)] {
        let m = model(c, 10);
        s.ensure_model(&m).unwrap();
        let f = frame(h, w, 1);
        let (_, t) = s.remote_forward(&f).unwrap();
        assert_eq!(
            t.bytes_sent + t.bytes_received,
            transfer_size(f.dims(), c) + CYCLE_FRAMING_OVERHEAD
        );
    }
}

#[test]
fn timing_splits_gpu_and_link() {
    let gpu = 0.02;
    let server = start(
        BackendProfile::new("slow", gpu, 0.0).unwrap(),
        ServerConfig::default(),
    );
    let opts = SessionOptions {
        link: LinkProfile::new("lan", 0.005, None).unwrap(),
        ..SessionOptions::default()
    };
    let mut s = connect(&addr(&server), &opts).unwrap();
    s.ensure_model(&model(2.0, 10)).unwrap();
    let start = Instant::now();
    let (_, t) = s.remote_forward(&frame(4, 4, 0)).unwrap();
    let wall = start.elapsed().as_secs_f64();
    assert!(t.gpu_s >= gpu && t.gpu_s < gpu + 0.01, "{t:?}");
    assert!(
        t.communication_s >= 0.010 && t.communication_s < 0.030,
        "{t:?}"
    );
    assert!((t.total_s() - wall).abs() / wall < 0.05, "{t:?} vs {wall}");
}

#[test]
fn single_cycle_in_flight() {
    let server = start(BackendProfile::none(), ServerConfig::default());
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    let f = frame(2, 2, 0);
    assert!(matches!(s.begin_cycle(&f), Err(ClientError::NoModel)));
    s.ensure_model(&model(2.0, 1)).unwrap();
    assert!(matches!(
        s.finish_cycle(),
        Err(ClientError::NoCycleInFlight)
    ));
    s.begin_cycle(&f).unwrap();
    assert!(matches!(s.begin_cycle(&f), Err(ClientError::CycleInFlight)));
    assert!(matches!(
        s.ensure_model(&model(3.0, 1)),
        Err(ClientError::CycleInFlight)
    ));
    s.finish_cycle().unwrap();
    s.remote_forward(&f).unwrap();
}

#[test]
fn closed_session_refuses_work() {
    let server = start(BackendProfile::none(), ServerConfig::default());
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    s.ensure_model(&model(2.0, 1)).unwrap();
    s.close();
    s.close();
    assert!(matches!(
        s.remote_forward(&frame(2, 2, 0)),
        Err(ClientError::Disconnected)
    ));
}

#[test]
fn close_with_cycle_in_flight_frees_the_server() {
    let server = start(
        BackendProfile::new("slow", 0.05, 0.0).unwrap(),
        ServerConfig::default(),
    );
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    s.ensure_model(&model(2.0, 1)).unwrap();
    s.begin_cycle(&frame(2, 2, 0)).unwrap();
    s.close();
    let deadline = Instant::now() + Duration::from_secs(5);
    while server.stats().active_sessions > 0 {
        assert!(Instant::now() < deadline, "session never released");
        thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn destination_dying_mid_cycle_is_disconnect() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    let fake = thread::spawn(move || {
        let (mut sock, _) = listener.accept().unwrap();
        let mut reader = FrameReader::default();
        let (hello, _) = reader.read_message(&mut sock).unwrap();
        assert!(matches!(hello, Message::Hello { version: 1 }));
        sock.write_all(&encode(&Message::HelloAck { version: 1 }).unwrap())
            .unwrap();
        let Message::ModelCheck { digest } = reader.read_message(&mut sock).unwrap().0 else {
            panic!("expected ModelCheck");
        };
        sock.write_all(&encode(&Message::ModelAck { digest }).unwrap())
            .unwrap();
        // take the cycle, then vanish without answering
        for _ in 0..3 {
            reader.read_message(&mut sock).unwrap();
        }
    });
    let mut s = connect(&endpoint, &SessionOptions::default()).unwrap();
    s.ensure_model(&model(2.0, 1)).unwrap();
    let err = s.remote_forward(&frame(2, 2, 0)).unwrap_err();
    fake.join().unwrap();
    assert!(matches!(err, ClientError::Disconnected), "{err:?}");
    assert!(s.is_closed());
}

#[test]
fn silent_destination_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    let _hold = thread::spawn(move || {
        let conn = listener.accept();
        thread::sleep(Duration::from_secs(2));
        drop(conn);
    });
    let opts = SessionOptions {
        connect_timeout: Duration::from_millis(200),
        ..SessionOptions::default()
    };
    let err = connect(&endpoint, &opts).unwrap_err();
    assert!(matches!(err, ClientError::Timeout), "{err:?}");
}

#[test]
fn shutdown_lets_the_running_cycle_finish() {
    let server = start(
        BackendProfile::new("slow", 0.2, 0.0).unwrap(),
        ServerConfig::default(),
    );
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    let m = model(2.0, 1);
    s.ensure_model(&m).unwrap();
    let f = frame(4, 4, 9);
    s.begin_cycle(&f).unwrap();
    thread::sleep(Duration::from_millis(30));
    let stopper = thread::spawn(move || {
        server.shutdown();
        server
    });
    let (heatmap, _) = s.finish_cycle().unwrap();
    assert!(heatmap.bit_eq(&mockpose_forward(&f, m.c()).unwrap()));
    let server = stopper.join().unwrap();
    assert!(server.is_stopped());
    assert!(s.remote_forward(&f).is_err());
}

#[test]
fn dispatcher_routes_by_configuration() {
    let server = start(BackendProfile::none(), ServerConfig::default());
    let m = model(3.368421, 64);
    let f = frame(10, 10, 3);
    let mut outputs = Vec::new();
    for text in [
        "mode = local".to_string(),
        format!("mode = remote\nendpoint = {}", addr(&server)),
    ] {
        let cfg = DispatchConfig::from_key_values(&KeyValues::parse(&text).unwrap()).unwrap();
        let mut d = Dispatcher::from_config(&cfg).unwrap();
        // identical application code either way
        d.load_model(&m).unwrap();
        let (h, t) = d.forward(&f).unwrap();
        if cfg.mode == DispatchMode::Local {
            assert_eq!(t.bytes_sent, 0);
        } else {
            assert!(t.bytes_sent > 0);
        }
        outputs.push(h);
        d.close();
    }
    assert!(outputs[0].bit_eq(&outputs[1]));
}

#[test]
fn custom_backend_behind_server() {
    // an Accelerator over a plain MockPose without any delay wrapper
    let server = serve(
        "127.0.0.1:0",
        Arc::new(Accelerator::new(MockPose::new())),
        ServerConfig::default(),
    )
    .unwrap();
    let mut s = connect(&addr(&server), &SessionOptions::default()).unwrap();
    s.ensure_model(&model(5.0, 3)).unwrap();
    let (h, t) = s.remote_forward(&frame(5, 5, 0)).unwrap();
    assert_eq!(h.elem_count(), 15);
    assert!(t.gpu_s < 0.01);
}
