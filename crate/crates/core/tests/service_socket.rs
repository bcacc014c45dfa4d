//! Detection service over real sockets.

use std::io::Write;
use std::net::TcpStream;
use std::time::{Duration, Instant};

use sajd_core::manager::{DriftMonitorConfig, HttpNotifier, JobExecution, ManagerLoop, SwapAck, TrainingManager};
use sajd_core::mlp::{MlpModel, TrainConfig};
use sajd_core::registry::ModelRegistry;
use sajd_core::service::{serve, ServeConfig, ServiceHandle, StatusReply};
use sajd_core::sim::row_pair_schedule;
use sajd_core::store::{Store, PREDICTIONS, RAW};
use sajd_core::*;

fn wait_for(handle: &ServiceHandle, received: u64) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while handle.service.stats().received < received && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

#[test]
fn control_endpoint_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let handle = serve(ServeConfig { registry_dir: Some(dir.path().to_path_buf()), ..ServeConfig::default() }).unwrap();
    let base = format!("http://{}", handle.control_addr);
    let agent = agent();

    let mut r = agent.get(format!("{base}/a1/status")).call().unwrap();
    assert_eq!(r.status(), 200);
    let status: StatusReply = r.body_mut().read_json().unwrap();
    assert_eq!(status.model_version, None);

    let r = agent.post(format!("{base}/a1/model-update")).send("not json").unwrap();
    assert_eq!(r.status(), 400);

    let mut r = agent
        .post(format!("{base}/a1/model-update"))
        .send_json(serde_json::json!({"model_version": 3, "registry_uri": "registry://v3"}))
        .unwrap();
    assert_eq!(r.status(), 422);
    let ack: SwapAck = r.body_mut().read_json().unwrap();
    assert!(!ack.ack);
    assert!(ack.error.unwrap().starts_with("FetchError"));

    let mut m = MlpModel::new_seeded(1);
    m.meta.version = 1;
    ModelRegistry::open(dir.path()).unwrap().register(&m).unwrap();
    let mut r = agent
        .post(format!("{base}/a1/model-update"))
        .send_json(serde_json::json!({"model_version": 1, "registry_uri": "registry://v1"}))
        .unwrap();
    assert_eq!(r.status(), 200);
    let ack: SwapAck = r.body_mut().read_json().unwrap();
    assert_eq!((ack.ack, ack.old, ack.new), (true, None, Some(1)));

    assert_eq!(agent.get(format!("{base}/nope")).call().unwrap().status(), 404);
    handle.shutdown().unwrap();
}

#[test]
fn stream_counts_bad_lines_and_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let handle = serve(ServeConfig { store_dir: Some(dir.path().to_path_buf()), ..ServeConfig::default() }).unwrap();
    let mut m = MlpModel::new_seeded(2);
    m.meta.version = 1;
    handle.service.install(m);

    let mut conn = TcpStream::connect(handle.stream_addr).unwrap();
    let sample =
        |i: u64| KpiSample { timestamp_ms: i * 100, ul_snr: 20.0, ul_mcs: 20, ul_bitrate: 15.0, ul_bler: 0.02 };
    let mut bytes = Vec::new();
    for i in 0..20 {
        bytes.extend(encode_sample(&sample(i)));
    }
    bytes.extend(b"{\"ts\": 1, garbage\n");
    // a 10 s hole resets the window
    for i in 120..140 {
        bytes.extend(encode_sample(&sample(i)));
    }
    conn.write_all(&bytes).unwrap();
    wait_for(&handle, 40);
    drop(conn);
    let stats = handle.shutdown().unwrap();
    assert_eq!(stats.received, 40);
    assert_eq!(stats.decode_errors, 1);
    assert_eq!(stats.gaps, 1);
    assert_eq!(stats.inferred, 2 * (20 - 14));

    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.len(RAW).unwrap(), 40);
    let preds: Vec<Prediction> = store.query_all(PREDICTIONS).unwrap();
    assert_eq!(preds.first().map(|p| p.ts), Some(1400));
    assert_eq!(preds.iter().filter(|p| p.ts >= 12_000).count(), 6);
}

#[test]
fn manager_bootstraps_service_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let handle = serve(ServeConfig {
        registry_dir: Some(dir.path().join("registry")),
        store_dir: Some(dir.path().join("store")),
        ..ServeConfig::default()
    })
    .unwrap();
    let registry = ModelRegistry::open(dir.path().join("registry")).unwrap();
    let train = TrainConfig { epochs: 10, ..TrainConfig::default() };
    let manager = TrainingManager::new(DriftMonitorConfig::default(), train, registry).unwrap();
    let mut lp = ManagerLoop::new(manager, LabelerConfig::default(), JobExecution::Inline { latency_ms: 0 });
    let mut notifier = HttpNotifier::new(&handle.control_addr.to_string());

    let stream = generate_stream(&row_pair_schedule(1, 60.0), &SimConfig::with_seed(4)).unwrap();
    let mut conn = TcpStream::connect(handle.stream_addr).unwrap();
    for s in &stream {
        conn.write_all(&encode_sample(&s.sample)).unwrap();
        lp.on_raw(s.sample);
        lp.tick(s.sample.timestamp_ms, &mut notifier).unwrap();
    }
    drop(conn);
    wait_for(&handle, stream.len() as u64);
    let events = lp.drain_events();
    assert!(events.iter().any(|e| e.kind == LoopEventKind::ModelSwapped && e.model_version == Some(1)));
    assert_eq!(handle.service.model_version(), Some(1));
    let stats = handle.shutdown().unwrap();
    assert!(stats.inferred > 0);
    assert_eq!(stats.dropped, 0);
}
