//! Training manager: bootstraps the first detector, tracks live accuracy
//! against auto-labels, decides drift and periodic retrains, runs training
//! jobs, versions models and notifies the detection service.

use std::collections::{BTreeMap, VecDeque};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{LabelerConfig, StreamLabeler};
use crate::mlp::{build_windows, train, MlpError, MlpModel, TrainConfig, WindowConfig};
use crate::registry::{uri_for, ModelRegistry, RegistryError};
use crate::telemetry::{KpiSample, Label, LabeledSample, LoopEvent, LoopEventKind, Prediction};

#[derive(Debug, Clone, PartialEq)]
pub struct DriftMonitorConfig {
    /// Ring buffer length, in scored predictions.
    pub eval_window: usize,
    pub drift_threshold: f64,
    pub cooldown_s: f64,
    pub periodic_interval_s: f64,
    pub min_bootstrap_samples: usize,
    /// Older samples added to a retrain set, as a fraction of the recent set.
    pub pad_fraction: f64,
    pub drift_enabled: bool,
    pub periodic_enabled: bool,
}

impl Default for DriftMonitorConfig {
    fn default() -> Self {
        DriftMonitorConfig {
            eval_window: 100,
            drift_threshold: 0.70,
            cooldown_s: 60.0,
            periodic_interval_s: 600.0,
            min_bootstrap_samples: 900,
            pad_fraction: 0.5,
            drift_enabled: true,
            periodic_enabled: true,
        }
    }
}

impl DriftMonitorConfig {
    /// Bootstrap only: no retraining once the first model is serving.
    pub fn static_baseline() -> Self {
        DriftMonitorConfig { drift_enabled: false, periodic_enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ManagerError> {
        let bad = |m: &str| Err(ManagerError::Config(m.into()));
        if !(self.drift_threshold > 0.0 && self.drift_threshold < 1.0) {
            return bad("drift_threshold must be in (0, 1)");
        }
        if !(self.cooldown_s > 0.0) || !(self.periodic_interval_s > 0.0) {
            return bad("cooldown_s and periodic_interval_s must be > 0");
        }
        if self.eval_window == 0 || self.min_bootstrap_samples == 0 {
            return bad("eval_window and min_bootstrap_samples must be >= 1");
        }
        if !(self.pad_fraction >= 0.0) {
            return bad("pad_fraction must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("not enough labelled data: need {needed}, have {got}")]
    NotEnoughData { needed: usize, got: usize },
    #[error("labelled data contains a single class")]
    SingleClassData,
    #[error("model v{version} not acknowledged after {attempts} attempts: {last_error}")]
    NotifyTimeout { version: u32, attempts: u32, last_error: String },
    #[error("detection service rejected v{version}: {reason}")]
    Rejected { version: u32, reason: String },
    #[error("invalid manager config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] MlpError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Rolling accuracy over the last `capacity` scored predictions.
#[derive(Debug, Clone)]
pub struct AccuracyMonitor {
    ring: VecDeque<bool>,
    capacity: usize,
    correct: usize,
}

impl AccuracyMonitor {
    pub fn new(capacity: usize) -> Self {
        AccuracyMonitor { ring: VecDeque::with_capacity(capacity), capacity, correct: 0 }
    }

    /// Records one comparison and returns the rolling accuracy.
    pub fn record(&mut self, predicted: Label, auto_label: Label) -> f64 {
        if self.ring.len() == self.capacity && self.ring.pop_front() == Some(true) {
            self.correct -= 1;
        }
        let hit = predicted == auto_label;
        self.ring.push_back(hit);
        self.correct += hit as usize;
        self.accuracy()
    }

    pub fn accuracy(&self) -> f64 {
        if self.ring.is_empty() {
            return 1.0;
        }
        self.correct as f64 / self.ring.len() as f64
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() == self.capacity
    }

    pub fn reset(&mut self) {
        self.ring.clear();
        self.correct = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrainReason {
    Bootstrap,
    Drift,
    Periodic,
}

/// Drift and periodic retrain decision. Drift needs a full ring, an
/// accuracy below the threshold and the cooldown elapsed since the last
/// trigger; drift wins over periodic.
pub fn check_drift(
    cfg: &DriftMonitorConfig,
    monitor: &AccuracyMonitor,
    now_ms: u64,
    last_trigger_ms: u64,
    last_retrain_ms: u64,
) -> Option<RetrainReason> {
    let since = |t: u64| now_ms.saturating_sub(t) as f64 / 1000.0;
    if cfg.drift_enabled
        && monitor.is_full()
        && monitor.accuracy() < cfg.drift_threshold
        && since(last_trigger_ms) >= cfg.cooldown_s
    {
        return Some(RetrainReason::Drift);
    }
    if cfg.periodic_enabled && since(last_retrain_ms) >= cfg.periodic_interval_s {
        return Some(RetrainReason::Periodic);
    }
    None
}

/// A1-style model update notification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelUpdate {
    pub model_version: u32,
    pub registry_uri: String,
}

impl ModelUpdate {
    pub fn for_version(v: u32) -> Self {
        ModelUpdate { model_version: v, registry_uri: uri_for(v) }
    }
}

/// Reply to a [`ModelUpdate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapAck {
    pub ack: bool,
    #[serde(default)]
    pub old: Option<u32>,
    #[serde(default)]
    pub new: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SwapAck {
    pub fn accepted(old: Option<u32>, new: u32) -> Self {
        SwapAck { ack: true, old, new: Some(new), error: None }
    }

    pub fn rejected(error: impl Into<String>) -> Self {
        SwapAck { ack: false, old: None, new: None, error: Some(error.into()) }
    }
}

#[derive(Debug, Error)]
pub enum NotifyError {
    #[error("unreachable after {attempts} attempts: {error}")]
    Unreachable { attempts: u32, error: String },
}

pub trait ModelNotifier {
    fn notify(&mut self, update: &ModelUpdate) -> Result<SwapAck, NotifyError>;
}

/// Posts updates to a detection service's control endpoint, retrying with
/// doubling backoff while it is unreachable.
#[derive(Debug, Clone)]
pub struct HttpNotifier {
    pub url: String,
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl HttpNotifier {
    /// `addr` is `host:port` of the control endpoint.
    pub fn new(addr: &str) -> Self {
        HttpNotifier {
            url: format!("http://{addr}/a1/model-update"),
            attempts: 5,
            initial_backoff: Duration::from_millis(100),
            timeout: Duration::from_secs(5),
        }
    }
}

impl ModelNotifier for HttpNotifier {
    fn notify(&mut self, update: &ModelUpdate) -> Result<SwapAck, NotifyError> {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(self.timeout)).build().into();
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match agent.post(&self.url).send_json(update) {
                Ok(mut resp) => match resp.body_mut().read_json::<SwapAck>() {
                    Ok(ack) => return Ok(ack),
                    Err(e) => last = format!("bad reply: {e}"),
                },
                Err(e) => last = e.to_string(),
            }
            tracing::warn!(attempt, error = %last, "model update notification failed");
        }
        Err(NotifyError::Unreachable { attempts: self.attempts.max(1), error: last })
    }
}

/// Inputs for one training run, detached from the manager so it can run on
/// a worker thread.
#[derive(Debug, Clone)]
pub struct TrainingJob {
    pub reason: RetrainReason,
    pub data: Vec<LabeledSample>,
    pub train_cfg: TrainConfig,
    pub window_cfg: WindowConfig,
    pub started_ms: u64,
}

impl TrainingJob {
    pub fn run(&self) -> Result<MlpModel, ManagerError> {
        let windows = build_windows(&self.data, &self.window_cfg)?;
        let mut model = train(&windows, &self.train_cfg)?.model;
        let first = self.data.first().map_or(0, |s| s.sample.timestamp_ms);
        let last = self.data.last().map_or(0, |s| s.sample.timestamp_ms + 1);
        model.meta.train_range = (first, last);
        Ok(model)
    }
}

/// Manager state shared by the in-process loop and the daemon.
#[derive(Debug)]
pub struct TrainingManager {
    pub cfg: DriftMonitorConfig,
    pub train_cfg: TrainConfig,
    pub window_cfg: WindowConfig,
    registry: ModelRegistry,
    monitor: AccuracyMonitor,
    serving: Option<u32>,
    pending_swap: Option<u32>,
    in_flight: Option<RetrainReason>,
    last_trigger_ms: u64,
    last_retrain_ms: u64,
    /// End (exclusive) of the newest training range.
    last_train_end_ms: u64,
    /// Predictions by the serving model awaiting their auto-label.
    pending_preds: BTreeMap<u64, Label>,
    events: Vec<LoopEvent>,
}

impl TrainingManager {
    pub fn new(cfg: DriftMonitorConfig, train_cfg: TrainConfig, registry: ModelRegistry) -> Result<Self, ManagerError> {
        cfg.validate()?;
        let window_cfg = WindowConfig { max_step_ms: None, ..Default::default() };
        Ok(TrainingManager {
            monitor: AccuracyMonitor::new(cfg.eval_window),
            cfg,
            train_cfg,
            window_cfg,
            registry,
            serving: None,
            pending_swap: None,
            in_flight: None,
            last_trigger_ms: 0,
            last_retrain_ms: 0,
            last_train_end_ms: 0,
            pending_preds: BTreeMap::new(),
            events: Vec::new(),
        })
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn serving_version(&self) -> Option<u32> {
        self.serving
    }

    pub fn pending_swap(&self) -> Option<u32> {
        self.pending_swap
    }

    pub fn in_flight(&self) -> Option<RetrainReason> {
        self.in_flight
    }

    pub fn monitor(&self) -> &AccuracyMonitor {
        &self.monitor
    }

    /// Events emitted since the last call.
    pub fn drain_events(&mut self) -> Vec<LoopEvent> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, ts: u64, kind: LoopEventKind, version: Option<u32>, detail: impl Into<String>) {
        let e = LoopEvent::new(ts, kind, version, detail);
        tracing::info!(ts = e.timestamp_ms, kind = %e.kind, version = ?e.model_version, detail = %e.detail, "loop event");
        self.events.push(e);
    }

    /// Scores one prediction against its auto-label and returns the rolling
    /// accuracy.
    pub fn record_inference(&mut self, predicted: Label, auto_label: Label) -> f64 {
        self.monitor.record(predicted, auto_label)
    }

    /// Holds a prediction until its auto-label arrives. Predictions by any
    /// model other than the serving one are ignored.
    pub fn record_prediction(&mut self, p: &Prediction) {
        if Some(p.model_version) == self.serving {
            self.pending_preds.insert(p.ts, p.label);
        }
    }

    /// Scores the pending prediction for this sample, if any.
    pub fn record_label(&mut self, l: &LabeledSample) -> Option<f64> {
        let ts = l.sample.timestamp_ms;
        let pred = self.pending_preds.remove(&ts);
        // Labels arrive in timestamp order; older predictions will never be scored.
        self.pending_preds = self.pending_preds.split_off(&ts);
        Some(self.record_inference(pred?, l.label?))
    }

    /// Retrain decision at `now_ms`, emitting the matching event. Nothing is
    /// decided while a job is in flight or a swap is pending, so requests
    /// raised meanwhile fold into that job.
    pub fn check(&mut self, now_ms: u64) -> Option<RetrainReason> {
        if self.serving.is_none() || self.in_flight.is_some() || self.pending_swap.is_some() {
            return None;
        }
        let reason = check_drift(&self.cfg, &self.monitor, now_ms, self.last_trigger_ms, self.last_retrain_ms)?;
        self.last_trigger_ms = now_ms;
        match reason {
            RetrainReason::Drift => {
                let detail = format!("accuracy {:.3} over {}", self.monitor.accuracy(), self.monitor.len());
                self.emit(now_ms, LoopEventKind::DriftDetected, self.serving, detail);
            }
            RetrainReason::Periodic => {
                let detail = format!("{:.0} s since last retrain", (now_ms - self.last_retrain_ms) as f64 / 1000.0);
                self.emit(now_ms, LoopEventKind::PeriodicRetrain, self.serving, detail);
            }
            RetrainReason::Bootstrap => {}
        }
        Some(reason)
    }

    /// Training set for a retrain at `now_ms`: labels from the last two
    /// periodic intervals, extended back to `min_bootstrap_samples` if short,
    /// plus an older pad of `pad_fraction` of that size.
    pub fn select_training_data(
        &self,
        labels: &[LabeledSample],
        reason: RetrainReason,
        now_ms: u64,
    ) -> Vec<LabeledSample> {
        if reason == RetrainReason::Bootstrap {
            return labels.to_vec();
        }
        let horizon = now_ms.saturating_sub((2.0 * self.cfg.periodic_interval_s * 1000.0) as u64);
        let mut start = labels.partition_point(|l| l.sample.timestamp_ms < horizon);
        let mut have = labels[start..].iter().filter(|l| !l.is_held()).count();
        while start > 0 && have < self.cfg.min_bootstrap_samples {
            start -= 1;
            have += !labels[start].is_held() as usize;
        }
        let pad = ((labels.len() - start) as f64 * self.cfg.pad_fraction).round() as usize;
        labels[start.saturating_sub(pad)..].to_vec()
    }

    /// Validates preconditions and marks a job in flight.
    pub fn prepare_job(
        &mut self,
        reason: RetrainReason,
        labels: &[LabeledSample],
        now_ms: u64,
    ) -> Result<TrainingJob, ManagerError> {
        let data = self.select_training_data(labels, reason, now_ms);
        let mut counts = [0usize; 2];
        for l in data.iter().filter_map(|l| l.label) {
            counts[l.as_index()] += 1;
        }
        let total = counts[0] + counts[1];
        if total < self.cfg.min_bootstrap_samples {
            return Err(ManagerError::NotEnoughData { needed: self.cfg.min_bootstrap_samples, got: total });
        }
        if reason != RetrainReason::Bootstrap {
            let fresh = data.iter().filter(|l| !l.is_held() && l.sample.timestamp_ms >= self.last_train_end_ms).count();
            if fresh == 0 {
                return Err(ManagerError::NotEnoughData { needed: 1, got: 0 });
            }
        }
        if counts.contains(&0) {
            return Err(ManagerError::SingleClassData);
        }
        let version = self.registry.next_version()?;
        let train_cfg = TrainConfig { seed: self.train_cfg.seed.wrapping_add(version as u64), ..self.train_cfg };
        self.in_flight = Some(reason);
        self.emit(
            now_ms,
            LoopEventKind::RetrainStarted,
            Some(version),
            format!("{reason:?}, {total} labelled samples"),
        );
        Ok(TrainingJob { reason, data, train_cfg, window_cfg: self.window_cfg, started_ms: now_ms })
    }

    /// Registers a finished job's model and queues it for delivery.
    pub fn complete_job(
        &mut self,
        job: &TrainingJob,
        result: Result<MlpModel, ManagerError>,
        now_ms: u64,
    ) -> Result<u32, ManagerError> {
        self.in_flight = None;
        let mut model = result?;
        let version = self.registry.next_version()?;
        model.meta.version = version;
        model.meta.parent_version = self.serving;
        model.meta.trained_at_ms = now_ms;
        self.registry.register(&model)?;
        self.last_retrain_ms = now_ms;
        self.last_train_end_ms = model.meta.train_range.1;
        self.pending_swap = Some(version);
        self.emit(
            now_ms,
            LoopEventKind::RetrainCompleted,
            Some(version),
            format!("{:?}, train accuracy {:.4}", job.reason, model.meta.eval_accuracy),
        );
        Ok(version)
    }

    /// Sends the pending model to the detection service. The swap counts
    /// only once acknowledged; on failure the model stays registered and
    /// pending.
    pub fn deliver(&mut self, notifier: &mut dyn ModelNotifier, now_ms: u64) -> Result<Option<u32>, ManagerError> {
        let Some(version) = self.pending_swap else { return Ok(None) };
        let update = ModelUpdate::for_version(version);
        match notifier.notify(&update) {
            Ok(ack) if ack.ack => {
                self.pending_swap = None;
                self.serving = Some(version);
                self.monitor.reset();
                self.pending_preds.clear();
                let detail = format!("v{} -> v{version}", ack.old.map_or("-".into(), |o| o.to_string()));
                self.emit(now_ms, LoopEventKind::ModelSwapped, Some(version), detail);
                Ok(Some(version))
            }
            Ok(ack) => {
                self.pending_swap = None;
                Err(ManagerError::Rejected { version, reason: ack.error.unwrap_or_default() })
            }
            Err(NotifyError::Unreachable { attempts, error }) => {
                Err(ManagerError::NotifyTimeout { version, attempts, last_error: error })
            }
        }
    }

    /// Prepare, train, register and deliver in one call.
    pub fn run_retrain(
        &mut self,
        reason: RetrainReason,
        labels: &[LabeledSample],
        notifier: &mut dyn ModelNotifier,
        now_ms: u64,
    ) -> Result<u32, ManagerError> {
        let job = self.prepare_job(reason, labels, now_ms)?;
        let result = job.run();
        let version = self.complete_job(&job, result, now_ms)?;
        self.deliver(notifier, now_ms)?;
        Ok(version)
    }
}

/// How training jobs execute inside [`ManagerLoop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobExecution {
    /// Train synchronously; the result is released `latency_ms` of stream
    /// time later. Deterministic.
    Inline { latency_ms: u64 },
    /// Train on a worker thread.
    Thread,
}

enum RunningJob {
    Ready { job: TrainingJob, result: Result<MlpModel, ManagerError>, ready_at_ms: u64 },
    Thread { job: TrainingJob, handle: JoinHandle<Result<MlpModel, ManagerError>> },
}

/// The manager plus its auto-labeler, driven by stream time: feed raw
/// samples and predictions, call [`ManagerLoop::tick`] to advance.
pub struct ManagerLoop {
    pub manager: TrainingManager,
    labeler: StreamLabeler,
    labels: Vec<LabeledSample>,
    class_counts: [usize; 2],
    bootstrap_attempt_at: usize,
    execution: JobExecution,
    job: Option<RunningJob>,
    now_ms: u64,
}

impl ManagerLoop {
    pub fn new(manager: TrainingManager, labeler_cfg: LabelerConfig, execution: JobExecution) -> Self {
        ManagerLoop {
            manager,
            labeler: StreamLabeler::new(labeler_cfg),
            labels: Vec::new(),
            class_counts: [0; 2],
            bootstrap_attempt_at: 0,
            execution,
            job: None,
            now_ms: 0,
        }
    }

    pub fn labels(&self) -> &[LabeledSample] {
        &self.labels
    }

    /// Feeds one raw sample to the labeler; returns the labels it released.
    pub fn on_raw(&mut self, s: KpiSample) -> Vec<LabeledSample> {
        self.now_ms = self.now_ms.max(s.timestamp_ms);
        let out = self.labeler.push(s);
        self.absorb(&out);
        out
    }

    /// Flushes the labeler at end of stream.
    pub fn finish_labels(&mut self) -> Vec<LabeledSample> {
        let out = self.labeler.finish();
        self.absorb(&out);
        out
    }

    fn absorb(&mut self, labels: &[LabeledSample]) {
        for l in labels {
            if let Some(label) = l.label {
                self.class_counts[label.as_index()] += 1;
            }
            self.manager.record_label(l);
        }
        self.labels.extend_from_slice(labels);
        self.trim_history();
    }

    /// Drops labels older than any retrain could use.
    fn trim_history(&mut self) {
        let cfg = &self.manager.cfg;
        let keep_ms = (2.0 * cfg.periodic_interval_s * 1000.0 * (1.0 + cfg.pad_fraction)) as u64;
        let keep_n = 2 * cfg.min_bootstrap_samples;
        if self.manager.serving.is_none() || self.labels.len() <= 2 * keep_n {
            return;
        }
        let horizon = self.now_ms.saturating_sub(keep_ms);
        let by_time = self.labels.partition_point(|l| l.sample.timestamp_ms < horizon);
        let cut = by_time.min(self.labels.len() - keep_n);
        if cut > keep_n {
            self.labels.drain(..cut);
        }
    }

    pub fn on_prediction(&mut self, p: &Prediction) {
        self.manager.record_prediction(p);
    }

    /// Advances to `now_ms`: finishes a due job, delivers a pending swap,
    /// then bootstraps or checks for drift. Errors other than data
    /// shortages are returned; the loop stays usable.
    pub fn tick(&mut self, now_ms: u64, notifier: &mut dyn ModelNotifier) -> Result<(), ManagerError> {
        self.now_ms = self.now_ms.max(now_ms);
        let now = self.now_ms;
        self.poll_job(now)?;
        if self.manager.pending_swap.is_some() {
            self.manager.deliver(notifier, now)?;
        }
        if self.job.is_some() || self.manager.pending_swap.is_some() {
            return Ok(());
        }
        let reason = if self.manager.serving.is_none() {
            let total = self.class_counts[0] + self.class_counts[1];
            let ready = total >= self.manager.cfg.min_bootstrap_samples
                && !self.class_counts.contains(&0)
                && total > self.bootstrap_attempt_at;
            if !ready {
                return Ok(());
            }
            self.bootstrap_attempt_at = total;
            RetrainReason::Bootstrap
        } else {
            match self.manager.check(now) {
                Some(r) => r,
                None => return Ok(()),
            }
        };
        match self.manager.prepare_job(reason, &self.labels, now) {
            Ok(job) => self.start_job(job, now),
            Err(ManagerError::NotEnoughData { .. } | ManagerError::SingleClassData) => {}
            Err(e) => return Err(e),
        }
        self.poll_job(now)?;
        if self.manager.pending_swap.is_some() {
            self.manager.deliver(notifier, now)?;
        }
        Ok(())
    }

    fn start_job(&mut self, job: TrainingJob, now: u64) {
        self.job = Some(match self.execution {
            JobExecution::Inline { latency_ms } => {
                let result = job.run();
                RunningJob::Ready { job, result, ready_at_ms: now + latency_ms }
            }
            JobExecution::Thread => {
                let worker = job.clone();
                RunningJob::Thread { job, handle: std::thread::spawn(move || worker.run()) }
            }
        });
    }

    fn poll_job(&mut self, now: u64) -> Result<(), ManagerError> {
        let done = match &self.job {
            Some(RunningJob::Ready { ready_at_ms, .. }) => *ready_at_ms <= now,
            Some(RunningJob::Thread { handle, .. }) => handle.is_finished(),
            None => false,
        };
        if !done {
            return Ok(());
        }
        let (job, result) = match self.job.take().unwrap() {
            RunningJob::Ready { job, result, .. } => (job, result),
            RunningJob::Thread { job, handle } => {
                let result =
                    handle.join().unwrap_or_else(|_| Err(ManagerError::Config("training thread panicked".into())));
                (job, result)
            }
        };
        match self.manager.complete_job(&job, result, now) {
            Ok(_) => Ok(()),
            Err(ManagerError::NotEnoughData { .. } | ManagerError::SingleClassData) => Ok(()),
            Err(ManagerError::Train(MlpError::SingleClassData | MlpError::InsufficientData { .. })) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn drain_events(&mut self) -> Vec<LoopEvent> {
        self.manager.drain_events()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_stream, SimConfig};
    use crate::telemetry::{LabelSource, ScenarioPhase, ScenarioSchedule};

    struct Recorder {
        updates: Vec<ModelUpdate>,
        current: Option<u32>,
        up: bool,
    }

    impl ModelNotifier for Recorder {
        fn notify(&mut self, update: &ModelUpdate) -> Result<SwapAck, NotifyError> {
            if !self.up {
                return Err(NotifyError::Unreachable { attempts: 1, error: "down".into() });
            }
            self.updates.push(update.clone());
            let old = self.current.replace(update.model_version);
            Ok(SwapAck::accepted(old, update.model_version))
        }
    }

    fn recorder() -> Recorder {
        Recorder { updates: Vec::new(), current: None, up: true }
    }

    fn manager(dir: &std::path::Path, cfg: DriftMonitorConfig) -> TrainingManager {
        let train_cfg = TrainConfig { epochs: 10, ..Default::default() };
        TrainingManager::new(cfg, train_cfg, ModelRegistry::open(dir).unwrap()).unwrap()
    }

    /// Ground-truth labels on an OFF/ON stream, so these tests exercise the
    /// manager and not the labeler.
    fn truth_labels(n_off: f64, n_on: f64) -> Vec<LabeledSample> {
        let sched = ScenarioSchedule::new(vec![ScenarioPhase::off(n_off, 0.1), ScenarioPhase::on(n_on, -8.0, 0.1)]);
        generate_stream(&sched, &SimConfig::with_seed(3))
            .unwrap()
            .into_iter()
            .map(|s| LabeledSample {
                sample: s.sample,
                label: Some(s.truth),
                source: LabelSource::GroundTruthSim,
                batch_id: 0,
            })
            .collect()
    }

    #[test]
    fn ring_semantics() {
        let mut m = AccuracyMonitor::new(100);
        for _ in 0..100 {
            m.record(Label::Interference, Label::Interference);
        }
        assert_eq!(m.accuracy(), 1.0);
        for i in 0..50 {
            m.record(Label::from_index(i % 2), Label::Interference);
        }
        // last 100: 50 hits then 25 hits of 50
        assert!((m.accuracy() - 0.75).abs() < 1e-12);
        let mut half = AccuracyMonitor::new(100);
        for i in 0..100 {
            half.record(Label::from_index(i % 2), Label::NoInterference);
        }
        assert_eq!(half.accuracy(), 0.5);
        assert_eq!(half.len(), 100);
    }

    #[test]
    fn drift_decisions() {
        let cfg = DriftMonitorConfig::default();
        let mut m = AccuracyMonitor::new(100);
        for i in 0..100 {
            m.record(if i < 65 { Label::Interference } else { Label::NoInterference }, Label::Interference);
        }
        assert_eq!(check_drift(&cfg, &m, 100_000, 0, 0), Some(RetrainReason::Drift));
        assert_eq!(check_drift(&cfg, &m, 5_000, 0, 0), None);
        let mut good = AccuracyMonitor::new(100);
        for _ in 0..100 {
            good.record(Label::Interference, Label::Interference);
        }
        assert_eq!(check_drift(&cfg, &good, 601_000, 0, 0), Some(RetrainReason::Periodic));
        assert_eq!(check_drift(&cfg, &good, 599_000, 0, 0), None);
        // not full: no drift path
        let mut partial = AccuracyMonitor::new(100);
        partial.record(Label::Interference, Label::NoInterference);
        assert_eq!(check_drift(&cfg, &partial, 100_000, 0, 0), None);
        assert_eq!(check_drift(&DriftMonitorConfig::static_baseline(), &m, 10_000_000, 0, 0), None);
    }

    #[test]
    fn bootstrap_registers_and_swaps() {
        let dir = tempfile::tempdir().unwrap();
        let mut mgr = manager(dir.path(), DriftMonitorConfig::default());
        let labels = truth_labels(45.0, 45.0);
        let mut n = recorder();
        let v = mgr.run_retrain(RetrainReason::Bootstrap, &labels, &mut n, 90_000).unwrap();
        assert_eq!(v, 1);
        assert_eq!(mgr.serving_version(), Some(1));
        assert_eq!(n.updates, vec![ModelUpdate::for_version(1)]);
        let events = mgr.drain_events();
        let kinds: Vec<_> = events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![LoopEventKind::RetrainStarted, LoopEventKind::RetrainCompleted, LoopEventKind::ModelSwapped]
        );
        assert!(crate::telemetry::events_well_ordered(&events));
        assert_eq!(mgr.registry().load(1).unwrap().meta.parent_version, None);
    }

    #[test]
    fn bootstrap_preconditions() {
        let dir = tempfile::tempdir().unwrap();
        let mut mgr = manager(dir.path(), DriftMonitorConfig::default());
        let labels = truth_labels(45.0, 45.0);
        assert!(matches!(
            mgr.prepare_job(RetrainReason::Bootstrap, &labels[..100], 0),
            Err(ManagerError::NotEnoughData { needed: 900, got: 100 })
        ));
        let off_only = truth_labels(95.0, 1.0);
        assert!(matches!(
            mgr.prepare_job(RetrainReason::Bootstrap, &off_only[..950], 0),
            Err(ManagerError::SingleClassData)
        ));
        assert_eq!(mgr.registry().latest().unwrap(), None);
        assert!(mgr.in_flight().is_none());
    }

    #[test]
    fn retrain_without_new_labels_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut mgr = manager(dir.path(), DriftMonitorConfig::default());
        let labels = truth_labels(45.0, 45.0);
        mgr.run_retrain(RetrainReason::Bootstrap, &labels, &mut recorder(), 90_000).unwrap();
        assert!(matches!(
            mgr.run_retrain(RetrainReason::Drift, &labels, &mut recorder(), 200_000),
            Err(ManagerError::NotEnoughData { .. })
        ));
        assert_eq!(mgr.registry().latest().unwrap(), Some(1));
    }

    #[test]
    fn notify_failure_keeps_model_pending() {
        let dir = tempfile::tempdir().unwrap();
        let mut mgr = manager(dir.path(), DriftMonitorConfig::default());
        let labels = truth_labels(45.0, 45.0);
        let mut down = Recorder { up: false, ..recorder() };
        assert!(matches!(
            mgr.run_retrain(RetrainReason::Bootstrap, &labels, &mut down, 90_000),
            Err(ManagerError::NotifyTimeout { version: 1, .. })
        ));
        assert_eq!(mgr.registry().latest().unwrap(), Some(1));
        assert_eq!(mgr.pending_swap(), Some(1));
        assert_eq!(mgr.serving_version(), None);
        assert_eq!(mgr.deliver(&mut recorder(), 91_000).unwrap(), Some(1));
        assert_eq!(mgr.serving_version(), Some(1));
    }

    #[test]
    fn http_notifier_times_out_when_service_is_down() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut n = HttpNotifier::new(&format!("127.0.0.1:{port}"));
        n.attempts = 2;
        n.initial_backoff = Duration::from_millis(10);
        assert!(matches!(n.notify(&ModelUpdate::for_version(1)), Err(NotifyError::Unreachable { attempts: 2, .. })));
    }

    #[test]
    fn predictions_are_scored_against_later_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut mgr = manager(dir.path(), DriftMonitorConfig::default());
        let labels = truth_labels(45.0, 45.0);
        mgr.run_retrain(RetrainReason::Bootstrap, &labels, &mut recorder(), 90_000).unwrap();
        for l in &labels[..10] {
            mgr.record_prediction(&Prediction {
                ts: l.sample.timestamp_ms,
                label: Label::NoInterference,
                p1: 0.1,
                model_version: 1,
            });
        }
        // stale model version is ignored
        mgr.record_prediction(&Prediction {
            ts: labels[10].sample.timestamp_ms,
            label: Label::Interference,
            p1: 0.9,
            model_version: 0,
        });
        for l in &labels[..11] {
            mgr.record_label(l);
        }
        assert_eq!(mgr.monitor().len(), 10);
        assert_eq!(mgr.monitor().accuracy(), 1.0);
    }

    #[test]
    fn data_selection_pads_with_older_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DriftMonitorConfig { periodic_interval_s: 30.0, min_bootstrap_samples: 100, ..Default::default() };
        let mgr = manager(dir.path(), cfg);
        let labels = truth_labels(100.0, 100.0);
        // recent window [140 s, 200 s) = 600 samples, plus 300 older
        let data = mgr.select_training_data(&labels, RetrainReason::Drift, 200_000);
        assert_eq!(data.len(), 900);
        assert_eq!(data[0].sample.timestamp_ms, 110_000);
        assert_eq!(mgr.select_training_data(&labels, RetrainReason::Bootstrap, 200_000).len(), 2000);
    }

    #[test]
    fn loop_bootstraps_once_both_classes_are_labelled() {
        let dir = tempfile::tempdir().unwrap();
        let mgr = manager(dir.path(), DriftMonitorConfig::default());
        let mut lp = ManagerLoop::new(mgr, LabelerConfig::default(), JobExecution::Inline { latency_ms: 0 });
        let sched = ScenarioSchedule::new(vec![
            ScenarioPhase::on(30.0, -8.0, 0.1),
            ScenarioPhase::off(60.0, 0.1),
            ScenarioPhase::on(60.0, -8.0, 0.1),
        ]);
        let mut n = recorder();
        for s in generate_stream(&sched, &SimConfig::with_seed(1)).unwrap() {
            lp.on_raw(s.sample);
            lp.tick(s.sample.timestamp_ms, &mut n).unwrap();
        }
        assert_eq!(lp.manager.serving_version(), Some(1));
        let events = lp.drain_events();
        assert!(crate::telemetry::events_well_ordered(&events));
        // OFF labels start at 30 s; 900 labels plus ON coverage needed
        let swap = events.iter().find(|e| e.kind == LoopEventKind::ModelSwapped).unwrap();
        assert!(swap.timestamp_ms > 90_000, "{swap:?}");
    }
}
