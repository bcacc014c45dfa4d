//! Closed-loop experiment runner and offline labeler evaluation.
//!
//! [`run_experiment`] wires simulator, detection service, auto-labeler and
//! training manager together on one logical clock: every simulated sample
//! is ingested by the service, then fed to the labeler, then the manager
//! ticks at that sample's timestamp. Training runs inline, so a run is a
//! pure function of its spec.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{run_labeler, LabelerConfig};
use crate::manager::{DriftMonitorConfig, JobExecution, ManagerError, ManagerLoop, TrainingManager};
use crate::mlp::TrainConfig;
use crate::registry::{ModelRegistry, RegistryError};
use crate::service::{DetectionService, LocalNotifier};
use crate::sim::{
    evaluation_schedule, generate_stream, row_pair_schedule, SimConfig, SimError, SimSample, DEFAULT_PHASE_S,
    EVALUATION_SCENES, SCENARIO_ROWS,
};
use crate::store::{Store, StoreError, EVENTS, LABELED, PREDICTIONS, RAW, TRUTH};
use crate::telemetry::{LoopEvent, LoopEventKind, Prediction, ScenarioSchedule, TruthRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Adaptive,
    #[serde(rename = "static")]
    StaticBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::StaticBaseline => "static",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("component startup failed: {0}")]
    ComponentStartup(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("writing outputs: {0}")]
    Output(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Output(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub schedule: ScenarioSchedule,
    /// One name per phase, used as `window_id`.
    pub window_names: Vec<String>,
    pub mode: Mode,
    pub seed: u64,
    /// Artifacts and per-mode work directories go here; a temporary
    /// directory is used when unset.
    pub output_dir: Option<PathBuf>,
    pub sim: SimConfig,
    pub labeler: LabelerConfig,
    pub drift: DriftMonitorConfig,
    pub train: TrainConfig,
    /// Stream time between a job starting and its model being released.
    pub train_latency_ms: u64,
    /// Pace the stream at its sample period instead of as fast as possible.
    pub realtime: bool,
}

impl ExperimentSpec {
    pub fn new(schedule: ScenarioSchedule, mode: Mode, seed: u64) -> Self {
        let window_names = (1..=schedule.phases.len()).map(|i| format!("p{i}")).collect();
        ExperimentSpec {
            schedule,
            window_names,
            mode,
            seed,
            output_dir: None,
            sim: SimConfig::default(),
            labeler: LabelerConfig::default(),
            drift: DriftMonitorConfig::default(),
            train: TrainConfig::default(),
            train_latency_ms: 1000,
            realtime: false,
        }
    }

    /// The twelve-scene evaluation run with scene names as window ids.
    pub fn evaluation(mode: Mode, seed: u64) -> Self {
        let mut spec = ExperimentSpec::new(evaluation_schedule(DEFAULT_PHASE_S), mode, seed);
        spec.window_names = EVALUATION_SCENES.iter().map(|s| s.to_string()).collect();
        spec
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        ExperimentSpec { mode, ..self.clone() }
    }

    fn drift_config(&self) -> DriftMonitorConfig {
        match self.mode {
            Mode::Adaptive => self.drift.clone(),
            Mode::StaticBaseline => {
                DriftMonitorConfig { drift_enabled: false, periodic_enabled: false, ..self.drift.clone() }
            }
        }
    }
}

/// Built-in schedules: `evaluation` (twelve scenes) and `pair-<odd row>`
/// (that row paired with the following OFF row, `ON, OFF, ON, OFF`).
pub fn named_schedule(name: &str) -> Option<(ScenarioSchedule, Vec<String>)> {
    if name == "evaluation" {
        let names = EVALUATION_SCENES.iter().map(|s| s.to_string()).collect();
        return Some((evaluation_schedule(DEFAULT_PHASE_S), names));
    }
    let row: usize = name.strip_prefix("pair-")?.parse().ok()?;
    if !(1..=17).contains(&row) || row % 2 == 0 {
        return None;
    }
    let names = ["on", "off", "on", "off"].iter().enumerate().map(|(i, k)| format!("{}{k}", i + 1)).collect();
    Some((row_pair_schedule(row, DEFAULT_PHASE_S), names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAccuracy {
    pub window_id: String,
    pub mode: Mode,
    /// `None` when the window has no predictions.
    pub accuracy: Option<f64>,
    pub n_predictions: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub windows: Vec<WindowAccuracy>,
    pub events: Vec<LoopEvent>,
    pub swap_count: usize,
    /// Index of the window in which the first model went live.
    pub bootstrap_window: Option<usize>,
    pub predictions: Vec<Prediction>,
}

impl ExperimentReport {
    pub fn count(&self, kind: LoopEventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Windows after the bootstrap window.
    pub fn post_bootstrap(&self) -> &[WindowAccuracy] {
        match self.bootstrap_window {
            Some(b) => &self.windows[b + 1..],
            None => &[],
        }
    }

    /// Mean of window accuracies over `ids`, skipping empty windows.
    pub fn mean_accuracy(&self, ids: &[&str]) -> Option<f64> {
        let v: Vec<f64> =
            self.windows.iter().filter(|w| ids.contains(&w.window_id.as_str())).filter_map(|w| w.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-phase accuracy of predictions against ground truth.
pub fn window_accuracy(
    stream: &[SimSample],
    schedule: &ScenarioSchedule,
    names: &[String],
    predictions: &[Prediction],
    mode: Mode,
) -> Vec<WindowAccuracy> {
    let bounds = schedule.phase_boundaries();
    let start = stream.first().map_or(0, |s| s.sample.timestamp_ms);
    let period = schedule.sample_period_ms;
    let n = schedule.phases.len();
    let mut correct = vec![0usize; n];
    let mut total = vec![0usize; n];
    for p in predictions {
        let idx = ((p.ts - start) / period) as usize;
        let Some(s) = stream.get(idx) else { continue };
        debug_assert_eq!(s.sample.timestamp_ms, p.ts);
        let w = bounds.partition_point(|b| *b <= idx).saturating_sub(1).min(n - 1);
        total[w] += 1;
        correct[w] += (p.label == s.truth) as usize;
    }
    (0..n)
        .map(|w| WindowAccuracy {
            window_id: names.get(w).cloned().unwrap_or_else(|| format!("p{}", w + 1)),
            mode,
            accuracy: (total[w] > 0).then(|| correct[w] as f64 / total[w] as f64),
            n_predictions: total[w],
        })
        .collect()
}

struct WorkDir {
    path: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

fn work_dir(spec: &ExperimentSpec) -> Result<WorkDir, ExperimentError> {
    match &spec.output_dir {
        Some(out) => {
            let path = out.join(spec.mode.as_str());
            if path.exists() {
                // Per-mode scratch space owned by earlier runs of this tool.
                fs::remove_dir_all(&path)?;
            }
            fs::create_dir_all(&path)?;
            Ok(WorkDir { path, _tmp: None })
        }
        None => {
            let tmp = tempfile::tempdir()?;
            Ok(WorkDir { path: tmp.path().to_path_buf(), _tmp: Some(tmp) })
        }
    }
}

/// Runs one mode. When `output_dir` is set, writes `report.csv`,
/// `events.csv` and `accuracy.svg` there; on failure writes
/// `report.partial.csv` with the windows seen so far.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, ExperimentError> {
    let report = run_mode(spec)?;
    if let Some(out) = &spec.output_dir {
        write_outputs(out, std::slice::from_ref(&report))?;
    }
    Ok(report)
}

/// Runs both modes on identical telemetry and writes combined outputs.
pub fn run_paired(spec: &ExperimentSpec) -> Result<(ExperimentReport, ExperimentReport), ExperimentError> {
    let adaptive = run_mode(&spec.with_mode(Mode::Adaptive))?;
    let baseline = run_mode(&spec.with_mode(Mode::StaticBaseline))?;
    if let Some(out) = &spec.output_dir {
        write_outputs(out, &[adaptive.clone(), baseline.clone()])?;
    }
    Ok((adaptive, baseline))
}

fn run_mode(spec: &ExperimentSpec) -> Result<ExperimentReport, ExperimentError> {
    if spec.schedule.phases.is_empty() {
        return Err(ExperimentError::ComponentStartup("no phases".into()));
    }
    spec.schedule.validate().map_err(|e| ExperimentError::ComponentStartup(e.to_string()))?;
    let sim = SimConfig { seed: spec.seed, ..spec.sim.clone() };
    let stream = generate_stream(&spec.schedule, &sim)?;

    let dir = work_dir(spec)?;
    let mut store = Store::open(dir.path.join("store"))?;
    let registry = ModelRegistry::open(dir.path.join("registry"))?;
    let service = Arc::new(DetectionService::new(Some(registry.clone()), spec.schedule.sample_period_ms));
    let train = TrainConfig { seed: spec.seed, ..spec.train };
    let manager = TrainingManager::new(spec.drift_config(), train, registry)
        .map_err(|e| ExperimentError::ComponentStartup(e.to_string()))?;
    let mut lp =
        ManagerLoop::new(manager, spec.labeler.clone(), JobExecution::Inline { latency_ms: spec.train_latency_ms });
    let mut notifier = LocalNotifier(service.clone());
    let mut session = service.session();

    let mut predictions = Vec::with_capacity(stream.len());
    let mut events = Vec::new();
    let period = Duration::from_millis(spec.schedule.sample_period_ms);
    let wall_start = Instant::now();

    let mut step = |i: usize, s: &SimSample| -> Result<(), ExperimentError> {
        if spec.realtime {
            let due = period * i as u32;
            if let Some(wait) = due.checked_sub(wall_start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let ts = s.sample.timestamp_ms;
        store.append(RAW, &s.sample)?;
        store.append(TRUTH, &TruthRecord { ts, label: s.truth })?;
        if let Some(p) = session.ingest(s.sample).prediction {
            store.append(PREDICTIONS, &p)?;
            lp.on_prediction(&p);
            predictions.push(p);
        }
        let labels = lp.on_raw(s.sample);
        store.append_all(LABELED, &labels)?;
        lp.tick(ts, &mut notifier)?;
        let new_events = lp.drain_events();
        store.append_all(EVENTS, &new_events)?;
        events.extend(new_events);
        Ok(())
    };

    let mut failure = None;
    for (i, s) in stream.iter().enumerate() {
        if let Err(e) = step(i, s) {
            failure = Some(e);
            break;
        }
    }
    if failure.is_none() {
        let labels = lp.finish_labels();
        store.append_all(LABELED, &labels)?;
        store.flush()?;
    }

    let windows = window_accuracy(&stream, &spec.schedule, &spec.window_names, &predictions, spec.mode);
    if let Some(e) = failure {
        if let Some(out) = &spec.output_dir {
            write_report_csv(&out.join("report.partial.csv"), &windows)?;
        }
        return Err(e);
    }
    let bounds = spec.schedule.phase_boundaries();
    let t0 = stream.first().map_or(0, |s| s.sample.timestamp_ms);
    let bootstrap_window = events.iter().find(|e| e.kind == LoopEventKind::ModelSwapped).map(|e| {
        let idx = ((e.timestamp_ms - t0) / spec.schedule.sample_period_ms) as usize;
        bounds.partition_point(|b| *b <= idx).saturating_sub(1)
    });
    let swap_count = events.iter().filter(|e| e.kind == LoopEventKind::ModelSwapped).count();
    Ok(ExperimentReport { mode: spec.mode, windows, events, swap_count, bootstrap_window, predictions })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    window_id: &'a str,
    mode: Mode,
    accuracy: String,
    n_predictions: usize,
}

fn write_report_csv(path: &Path, windows: &[WindowAccuracy]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for win in windows {
        w.serialize(ReportRow {
            window_id: &win.window_id,
            mode: win.mode,
            accuracy: win.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            n_predictions: win.n_predictions,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EventRow<'a> {
    mode: Mode,
    ts: u64,
    kind: String,
    model_version: Option<u32>,
    detail: &'a str,
}

fn write_outputs(out: &Path, reports: &[ExperimentReport]) -> Result<(), ExperimentError> {
    fs::create_dir_all(out)?;
    let windows: Vec<WindowAccuracy> = reports.iter().flat_map(|r| r.windows.iter().cloned()).collect();
    write_report_csv(&out.join("report.csv"), &windows)?;
    let partial = out.join("report.partial.csv");
    if partial.exists() {
        fs::remove_file(partial)?;
    }
    let mut w = csv::Writer::from_path(out.join("events.csv"))?;
    for r in reports {
        for e in &r.events {
            w.serialize(EventRow {
                mode: r.mode,
                ts: e.timestamp_ms,
                kind: e.kind.to_string(),
                model_version: e.model_version,
                detail: &e.detail,
            })?;
        }
    }
    w.flush()?;
    plot_accuracy(&out.join("accuracy.svg"), reports)
}

fn plot_accuracy(path: &Path, reports: &[ExperimentReport]) -> Result<(), ExperimentError> {
    let err = |e: &dyn std::fmt::Display| ExperimentError::Output(e.to_string());
    let n = reports.iter().map(|r| r.windows.len()).max().unwrap_or(0);
    let names: Vec<String> =
        reports.first().map(|r| r.windows.iter().map(|w| w.window_id.clone()).collect()).unwrap_or_default();
    let root = SVGBackend::new(path, (900, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Detection accuracy per window", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5).max(0.5), 0f64..1.02f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                names.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("window")
        .y_desc("accuracy")
        .draw()
        .map_err(|e| err(&e))?;
    for (k, r) in reports.iter().enumerate() {
        let color = if r.mode == Mode::Adaptive { BLUE } else { RED };
        let pts: Vec<(f64, f64)> =
            r.windows.iter().enumerate().filter_map(|(i, w)| w.accuracy.map(|a| (i as f64, a))).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(r.mode.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(move |p| Circle::new(p, 3 + k as u32, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerLeft)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Labeler agreement with ground truth on one table row pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelerRowEval {
    /// 1-based ON row; the stream alternates it with row `on_row + 1`.
    pub on_row: usize,
    pub interference_db: f64,
    pub noise_amplitude: f64,
    pub samples: usize,
    /// Samples that received a label (not held).
    pub emitted: usize,
    pub correct: usize,
    pub emitted_excl: usize,
    pub correct_excl: usize,
}

impl LabelerRowEval {
    /// Agreement over emitted labels.
    pub fn agreement(&self) -> Option<f64> {
        (self.emitted > 0).then(|| self.correct as f64 / self.emitted as f64)
    }

    /// Agreement over emitted labels away from phase boundaries.
    pub fn agreement_excl(&self) -> Option<f64> {
        (self.emitted_excl > 0).then(|| self.correct_excl as f64 / self.emitted_excl as f64)
    }

    pub fn coverage(&self) -> f64 {
        self.emitted as f64 / self.samples as f64
    }
}

/// Samples within this distance of a phase boundary are excluded from the
/// transition-excluded agreement.
pub const TRANSITION_MARGIN: usize = 30;

/// Runs the labeler offline on each ON/OFF row pair of the scenario table
/// (`ON, OFF, ON, OFF`, `phase_s` each). Row pair `r` uses seed
/// `sim.seed + r`.
pub fn run_row_pair_labeler_eval(
    sim: &SimConfig,
    labeler: &LabelerConfig,
    phase_s: f64,
) -> Result<Vec<LabelerRowEval>, SimError> {
    (1..=17)
        .step_by(2)
        .map(|row| {
            let sched = row_pair_schedule(row, phase_s);
            let cfg = SimConfig { seed: sim.seed.wrapping_add(row as u64), ..sim.clone() };
            let stream = generate_stream(&sched, &cfg)?;
            let samples: Vec<_> = stream.iter().map(|s| s.sample).collect();
            let labels = run_labeler(&samples, labeler);
            let bounds = sched.phase_boundaries();
            let interior = &bounds[1..bounds.len() - 1];
            let near = |i: usize| interior.iter().any(|&b| i + TRANSITION_MARGIN > b && i < b + TRANSITION_MARGIN);
            let (_, db, amp) = SCENARIO_ROWS[row - 1];
            let mut e = LabelerRowEval {
                on_row: row,
                interference_db: db,
                noise_amplitude: amp,
                samples: stream.len(),
                emitted: 0,
                correct: 0,
                emitted_excl: 0,
                correct_excl: 0,
            };
            for (i, (l, s)) in labels.iter().zip(&stream).enumerate() {
                let Some(label) = l.label else { continue };
                let hit = (label == s.truth) as usize;
                e.emitted += 1;
                e.correct += hit;
                if !near(i) {
                    e.emitted_excl += 1;
                    e.correct_excl += hit;
                }
            }
            Ok(e)
        })
        .collect()
}

/// Transition-excluded agreement pooled over the rows at one jammer level.
pub fn pooled_agreement_excl(rows: &[LabelerRowEval], interference_db: f64) -> Option<f64> {
    let (c, n) = rows
        .iter()
        .filter(|r| r.interference_db == interference_db)
        .fold((0, 0), |(c, n), r| (c + r.correct_excl, n + r.emitted_excl));
    (n > 0).then(|| c as f64 / n as f64)
}
