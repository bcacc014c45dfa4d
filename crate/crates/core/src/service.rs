//! Detection service: sliding-window inference over a live KPI stream with
//! hot-swappable models.
//!
//! The stream arrives as NDJSON samples on a TCP socket; control requests
//! (`POST /a1/model-update`, `GET /a1/status`) are HTTP. The serving model
//! sits behind an `RwLock`: each inference runs under the read lock and a
//! swap takes the write lock, so every prediction comes from exactly one
//! model and a swap lands between two inferences.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manager::{ModelNotifier, ModelUpdate, NotifyError, SwapAck};
use crate::mlp::{FeatureWindow, MlpModel, WINDOW_STEPS};
use crate::registry::{parse_uri, ModelRegistry, RegistryError};
use crate::store::{Store, StoreError, PREDICTIONS, RAW};
use crate::telemetry::{
    decode_sample, validate_sample, KpiSample, Prediction, TelemetryError, DEFAULT_SAMPLE_PERIOD_MS,
};

/// A timestamp jump above this many sample periods resets the window.
pub const GAP_FACTOR: u64 = 5;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {msg}")]
    Bind { addr: String, msg: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ServiceStats {
    pub received: u64,
    pub inferred: u64,
    pub dropped: u64,
    pub decode_errors: u64,
    pub gaps: u64,
}

/// `GET /a1/status` reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReply {
    pub model_version: Option<u32>,
    #[serde(flatten)]
    pub stats: ServiceStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapRecord {
    /// Timestamp of the newest sample received before the swap.
    pub ts: Option<u64>,
    pub old: Option<u32>,
    pub new: u32,
    /// Predictions emitted before the swap.
    pub inferred_before: u64,
}

#[derive(Default)]
struct Counters {
    received: AtomicU64,
    inferred: AtomicU64,
    dropped: AtomicU64,
    decode_errors: AtomicU64,
    gaps: AtomicU64,
    last_ts: Mutex<Option<u64>>,
}

pub struct DetectionService {
    model: RwLock<Option<Arc<MlpModel>>>,
    registry: Option<ModelRegistry>,
    counters: Counters,
    swap_log: Mutex<Vec<SwapRecord>>,
    sample_period_ms: u64,
}

/// Outcome of ingesting one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ingested {
    pub prediction: Option<Prediction>,
    /// The sample followed a timestamp gap and restarted the window.
    pub gap: bool,
}

impl DetectionService {
    pub fn new(registry: Option<ModelRegistry>, sample_period_ms: u64) -> Self {
        DetectionService {
            model: RwLock::new(None),
            registry,
            counters: Counters::default(),
            swap_log: Mutex::new(Vec::new()),
            sample_period_ms,
        }
    }

    pub fn sample_period_ms(&self) -> u64 {
        self.sample_period_ms
    }

    pub fn model_version(&self) -> Option<u32> {
        self.model.read().unwrap().as_ref().map(|m| m.version())
    }

    pub fn stats(&self) -> ServiceStats {
        let c = &self.counters;
        ServiceStats {
            received: c.received.load(Ordering::SeqCst),
            inferred: c.inferred.load(Ordering::SeqCst),
            dropped: c.dropped.load(Ordering::SeqCst),
            decode_errors: c.decode_errors.load(Ordering::SeqCst),
            gaps: c.gaps.load(Ordering::SeqCst),
        }
    }

    pub fn status(&self) -> StatusReply {
        StatusReply { model_version: self.model_version(), stats: self.stats() }
    }

    pub fn swap_log(&self) -> Vec<SwapRecord> {
        self.swap_log.lock().unwrap().clone()
    }

    /// Swaps in `model` unless its version is already serving.
    pub fn install(&self, model: MlpModel) -> SwapAck {
        let new = model.version();
        let mut slot = self.model.write().unwrap();
        let old = slot.as_ref().map(|m| m.version());
        if old == Some(new) {
            return SwapAck::accepted(old, new);
        }
        *slot = Some(Arc::new(model));
        self.swap_log.lock().unwrap().push(SwapRecord {
            ts: *self.counters.last_ts.lock().unwrap(),
            old,
            new,
            inferred_before: self.counters.inferred.load(Ordering::SeqCst),
        });
        tracing::info!(?old, new, "model swapped");
        SwapAck::accepted(old, new)
    }

    /// Fetches the announced model from the registry and swaps it in. The
    /// model is fully loaded before the swap; on any failure the current
    /// model keeps serving.
    pub fn handle_model_update(&self, update: &ModelUpdate) -> SwapAck {
        if self.model_version() == Some(update.model_version) {
            return SwapAck::accepted(Some(update.model_version), update.model_version);
        }
        let Some(registry) = &self.registry else {
            return SwapAck::rejected("FetchError: no registry configured");
        };
        let version = match parse_uri(&update.registry_uri) {
            Ok(v) if v == update.model_version => v,
            Ok(v) => {
                return SwapAck::rejected(format!("FetchError: uri names v{v}, update names v{}", update.model_version))
            }
            Err(e) => return SwapAck::rejected(format!("FetchError: {e}")),
        };
        match registry.load(version) {
            Ok(m) if m.version() == version => self.install(m),
            Ok(m) => SwapAck::rejected(format!("FormatError: file holds v{}", m.version())),
            Err(e @ RegistryError::NotFound(_)) => SwapAck::rejected(format!("FetchError: {e}")),
            Err(e) => SwapAck::rejected(format!("FormatError: {e}")),
        }
    }

    pub fn session(&self) -> StreamSession<'_> {
        StreamSession { svc: self, window: VecDeque::with_capacity(WINDOW_STEPS), last_ts: None }
    }

    fn infer(&self, samples: &VecDeque<KpiSample>) -> Option<Prediction> {
        let (a, b) = samples.as_slices();
        let contiguous: Vec<KpiSample> = a.iter().chain(b).copied().collect();
        let window = FeatureWindow::from_samples(&contiguous, None).expect("window holds 15 samples");
        let ts = contiguous.last().unwrap().timestamp_ms;
        let guard = self.model.read().unwrap();
        let model = guard.as_ref()?;
        let (label, p1) = model.predict(&window.values).expect("window has model input shape");
        self.counters.inferred.fetch_add(1, Ordering::SeqCst);
        Some(Prediction { ts, label, p1, model_version: model.version() })
    }
}

/// Per-connection window state. A new session starts with an empty window;
/// counters live on the service.
pub struct StreamSession<'a> {
    svc: &'a DetectionService,
    window: VecDeque<KpiSample>,
    last_ts: Option<u64>,
}

impl StreamSession<'_> {
    pub fn ingest(&mut self, sample: KpiSample) -> Ingested {
        let c = &self.svc.counters;
        c.received.fetch_add(1, Ordering::SeqCst);
        *c.last_ts.lock().unwrap() = Some(sample.timestamp_ms);
        let limit = GAP_FACTOR * self.svc.sample_period_ms;
        let gap = self.last_ts.is_some_and(|t| sample.timestamp_ms < t || sample.timestamp_ms - t > limit);
        if gap {
            c.gaps.fetch_add(1, Ordering::SeqCst);
            tracing::warn!(ts = sample.timestamp_ms, last = ?self.last_ts, "timestamp gap, window reset");
            self.window.clear();
        }
        self.last_ts = Some(sample.timestamp_ms);
        if self.window.len() == WINDOW_STEPS {
            self.window.pop_front();
        }
        self.window.push_back(sample);
        let prediction = if self.window.len() == WINDOW_STEPS { self.svc.infer(&self.window) } else { None };
        Ingested { prediction, gap }
    }

    /// Decodes and ingests one wire line. Bad lines are counted and skipped.
    pub fn ingest_line(&mut self, line: &[u8]) -> Result<Ingested, TelemetryError> {
        match decode_sample(line).and_then(validate_sample) {
            Ok(s) => Ok(self.ingest(s)),
            Err(e) => {
                self.svc.counters.decode_errors.fetch_add(1, Ordering::SeqCst);
                Err(e)
            }
        }
    }

    pub fn buffered(&self) -> usize {
        self.window.len()
    }
}

/// Notifies an in-process service directly.
#[derive(Clone)]
pub struct LocalNotifier(pub Arc<DetectionService>);

impl ModelNotifier for LocalNotifier {
    fn notify(&mut self, update: &ModelUpdate) -> Result<SwapAck, NotifyError> {
        Ok(self.0.handle_model_update(update))
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub stream_listen_addr: String,
    pub control_listen_addr: String,
    pub registry_dir: Option<PathBuf>,
    /// Raw samples and predictions are logged here when set.
    pub store_dir: Option<PathBuf>,
    pub sample_period_ms: u64,
    /// Serve the registry's latest model from startup.
    pub load_latest: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            stream_listen_addr: "127.0.0.1:0".into(),
            control_listen_addr: "127.0.0.1:0".into(),
            registry_dir: None,
            store_dir: None,
            sample_period_ms: DEFAULT_SAMPLE_PERIOD_MS,
            load_latest: true,
        }
    }
}

enum LogRecord {
    Raw(KpiSample),
    Prediction(Prediction),
}

/// A running service. Dropping it without [`ServiceHandle::shutdown`]
/// leaves the threads running until process exit.
pub struct ServiceHandle {
    pub stream_addr: SocketAddr,
    pub control_addr: SocketAddr,
    pub service: Arc<DetectionService>,
    stop: Arc<AtomicBool>,
    http: Arc<tiny_http::Server>,
    threads: Vec<JoinHandle<()>>,
    logger: Option<JoinHandle<Result<(), StoreError>>>,
}

impl ServiceHandle {
    /// Stops accepting, drains the current connection's buffered input and
    /// flushes the log.
    pub fn shutdown(mut self) -> Result<ServiceStats, ServiceError> {
        self.stop.store(true, Ordering::SeqCst);
        self.http.unblock();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(l) = self.logger.take() {
            l.join().expect("logger thread panicked")?;
        }
        Ok(self.service.stats())
    }
}

fn bind_error(addr: &str, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Bind { addr: addr.into(), msg: e.to_string() }
}

pub fn serve(cfg: ServeConfig) -> Result<ServiceHandle, ServiceError> {
    let registry = cfg.registry_dir.as_ref().map(ModelRegistry::open).transpose()?;
    let service = Arc::new(DetectionService::new(registry, cfg.sample_period_ms));
    if cfg.load_latest {
        if let Some(m) = service.registry.as_ref().map(|r| r.load_latest()).transpose()?.flatten() {
            service.install(m);
        }
    }

    let listener = TcpListener::bind(&cfg.stream_listen_addr).map_err(|e| bind_error(&cfg.stream_listen_addr, e))?;
    listener.set_nonblocking(true)?;
    let stream_addr = listener.local_addr()?;
    let http = Arc::new(
        tiny_http::Server::http(&cfg.control_listen_addr).map_err(|e| bind_error(&cfg.control_listen_addr, e))?,
    );
    let control_addr =
        http.server_addr().to_ip().ok_or_else(|| bind_error(&cfg.control_listen_addr, "not an IP listener"))?;

    let stop = Arc::new(AtomicBool::new(false));
    let (tx, logger) = match &cfg.store_dir {
        Some(dir) => {
            let store = Store::open(dir)?;
            let (tx, rx) = mpsc::channel();
            (Some(tx), Some(thread::spawn(move || log_records(store, rx))))
        }
        None => (None, None),
    };

    let mut threads = Vec::new();
    {
        let (service, stop) = (service.clone(), stop.clone());
        threads.push(thread::spawn(move || stream_loop(listener, &service, &stop, tx)));
    }
    {
        let (service, stop, http) = (service.clone(), stop.clone(), http.clone());
        threads.push(thread::spawn(move || control_loop(&http, &service, &stop)));
    }
    tracing::info!(%stream_addr, %control_addr, "detection service listening");
    Ok(ServiceHandle { stream_addr, control_addr, service, stop, http, threads, logger })
}

fn log_records(mut store: Store, rx: Receiver<LogRecord>) -> Result<(), StoreError> {
    for rec in rx {
        match rec {
            LogRecord::Raw(s) => store.append(RAW, &s)?,
            LogRecord::Prediction(p) => store.append(PREDICTIONS, &p)?,
        }
    }
    store.flush()
}

fn stream_loop(listener: TcpListener, svc: &DetectionService, stop: &AtomicBool, tx: Option<Sender<LogRecord>>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((conn, peer)) => {
                tracing::info!(%peer, "stream connected");
                if let Err(e) = handle_stream(conn, svc, stop, tx.as_ref()) {
                    tracing::warn!(%peer, error = %e, "stream connection ended with error");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                tracing::error!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle_stream(
    conn: TcpStream,
    svc: &DetectionService,
    stop: &AtomicBool,
    tx: Option<&Sender<LogRecord>>,
) -> io::Result<()> {
    conn.set_nonblocking(false)?;
    conn.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut reader = BufReader::new(conn);
    let mut session = svc.session();
    let mut line = Vec::new();
    let send = |rec: LogRecord| {
        if let Some(tx) = tx {
            if tx.send(rec).is_err() {
                svc.counters.dropped.fetch_add(1, Ordering::SeqCst);
            }
        }
    };
    loop {
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => {
                if !line.is_empty() {
                    let _ = session.ingest_line(&line);
                }
                return Ok(());
            }
            Ok(_) if line.ends_with(b"\n") => {
                if line.iter().any(|b| !b.is_ascii_whitespace()) {
                    match decode_sample(&line).and_then(validate_sample) {
                        Ok(s) => {
                            let out = session.ingest(s);
                            send(LogRecord::Raw(s));
                            if let Some(p) = out.prediction {
                                send(LogRecord::Prediction(p));
                            }
                        }
                        Err(e) => {
                            svc.counters.decode_errors.fetch_add(1, Ordering::SeqCst);
                            tracing::warn!(error = %e, "undecodable stream record");
                        }
                    }
                }
                line.clear();
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if stop.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

fn json_response(code: u16, body: &impl Serialize) -> tiny_http::Response<io::Cursor<Vec<u8>>> {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    tiny_http::Response::from_string(serde_json::to_string(body).expect("reply serializes"))
        .with_status_code(code)
        .with_header(header)
}

fn control_loop(http: &tiny_http::Server, svc: &DetectionService, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        let mut req = match http.recv_timeout(Duration::from_millis(100)) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => {
                tracing::error!(error = %e, "control endpoint failed");
                return;
            }
        };
        let reply = match (req.method(), req.url()) {
            (tiny_http::Method::Get, "/a1/status") => json_response(200, &svc.status()),
            (tiny_http::Method::Post, "/a1/model-update") => {
                let mut body = Vec::new();
                let parsed = req
                    .as_reader()
                    .read_to_end(&mut body)
                    .map_err(|e| e.to_string())
                    .and_then(|_| serde_json::from_slice::<ModelUpdate>(&body).map_err(|e| e.to_string()));
                match parsed {
                    Ok(update) => {
                        let ack = svc.handle_model_update(&update);
                        json_response(if ack.ack { 200 } else { 422 }, &ack)
                    }
                    Err(e) => json_response(400, &SwapAck::rejected(format!("bad request: {e}"))),
                }
            }
            _ => json_response(404, &SwapAck::rejected("not found")),
        };
        if let Err(e) = req.respond(reply) {
            tracing::warn!(error = %e, "control reply failed");
        }
    }
}
