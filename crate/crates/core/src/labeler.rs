//! Unsupervised auto-labeler over the smoothed SNR series.
//!
//! The stream is smoothed, cut into consecutive batches and each batch goes
//! through [`LabelerState::label_batch`]:
//!
//! 1. The batch is z-scored and its average rate of change is compared with
//!    `tau`. Above `tau` the batch may carry an event transition.
//! 2. A triggered batch is joined with the preceding batch (the fit window)
//!    and the raw SNR of that window must contain a significant level shift
//!    before a fresh two-component mixture is fitted on it. The scaler used
//!    for the fit is kept with the mixture so later batches are projected
//!    into the same coordinates.
//! 3. The component with the lower mean SNR is the interference component.
//! 4. Batches that do not produce a new model reuse the current one, or are
//!    held (label deferred) while no model exists.

use std::collections::VecDeque;

use crate::gmm::{em_fit, gmm_predict, EmConfig, Gmm1d};
use crate::prep::{arc_of, standard_scale, Batch, PrepError, Scaler, SmoothingConfig};
use crate::telemetry::{KpiSample, Label, LabelSource, LabeledSample};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelerConfig {
    /// Trigger threshold on |ARC| of the scaled batch.
    pub tau: f64,
    pub batch_size: usize,
    pub smoothing: SmoothingConfig,
    /// Preceding batches joined to a triggered batch for fitting.
    pub context_batches: usize,
    /// Minimum two-segment t statistic on raw SNR for a fit window to count
    /// as containing a transition.
    pub min_shift_t: f64,
    /// Shortest segment considered by the level-shift scan.
    pub min_segment: usize,
    pub em: EmConfig,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            tau: 0.0004,
            batch_size: 30,
            smoothing: SmoothingConfig::default(),
            context_batches: 1,
            min_shift_t: 6.0,
            min_segment: 3,
            em: EmConfig::default(),
        }
    }
}

/// A fitted labeling model: scaler and mixture fitted on the same window.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelingModel {
    pub scaler: Scaler,
    pub gmm: Gmm1d,
    pub interference_component: usize,
    /// Stream index range `[start, end)` the model was fitted on.
    pub fitted_on: (usize, usize),
}

impl LabelingModel {
    fn from_gmm(scaler: Scaler, gmm: Gmm1d, fitted_on: (usize, usize)) -> Self {
        let interference_component = gmm.lower_mean_component();
        LabelingModel { scaler, gmm, interference_component, fitted_on }
    }

    /// Label for one smoothed SNR value. Values beyond either component mean
    /// are assigned to that outer component, so labels are monotone in SNR
    /// even when the component variances differ.
    pub fn label(&self, smoothed_snr: f64) -> Label {
        let z = self.scaler.transform(smoothed_snr);
        let lo = self.gmm.lower_mean_component();
        let hi = 1 - lo;
        let component = if z <= self.gmm.means[lo] {
            lo
        } else if z >= self.gmm.means[hi] {
            hi
        } else {
            gmm_predict(&self.gmm, z).0
        };
        if component == self.interference_component {
            Label::Interference
        } else {
            Label::NoInterference
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchDecision {
    /// A new model was fitted and used.
    Refit,
    /// The current model labelled the batch.
    Reused,
    /// No model yet; labels deferred.
    Held,
    /// Zero-variance batch, skipped.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// One entry per batch value; `None` is a held label.
    pub labels: Vec<Option<Label>>,
    pub decision: BatchDecision,
    pub arc: Option<f64>,
    /// Level-shift statistic of the fit window, computed only when triggered.
    pub shift_t: Option<f64>,
}

#[derive(Debug, Clone)]
struct ContextBatch {
    start: usize,
    end: usize,
    smoothed: Vec<f64>,
    raw: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LabelerState {
    pub cfg: LabelerConfig,
    model: Option<LabelingModel>,
    pub last_change_idx: usize,
    pub start_idx: usize,
    context: VecDeque<ContextBatch>,
}

/// Largest two-segment t statistic over all split points of `raw`, using
/// the pooled within-segment standard deviation.
pub fn level_shift_statistic(raw: &[f64], min_segment: usize) -> f64 {
    let n = raw.len();
    let min_segment = min_segment.max(1);
    if n < 2 * min_segment || n < 3 {
        return 0.0;
    }
    let mut prefix = Vec::with_capacity(n + 1);
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    prefix_sq.push(0.0);
    for &x in raw {
        prefix.push(prefix.last().unwrap() + x);
        prefix_sq.push(prefix_sq.last().unwrap() + x * x);
    }
    let (total, total_sq) = (prefix[n], prefix_sq[n]);
    let mut best = 0.0f64;
    for k in min_segment..=n - min_segment {
        let (n1, n2) = (k as f64, (n - k) as f64);
        let m1 = prefix[k] / n1;
        let m2 = (total - prefix[k]) / n2;
        let ss1 = prefix_sq[k] - n1 * m1 * m1;
        let ss2 = (total_sq - prefix_sq[k]) - n2 * m2 * m2;
        let pooled = ((ss1 + ss2).max(0.0) / (n as f64 - 2.0)).sqrt().max(1e-12);
        let t = (m1 - m2).abs() / (pooled * (1.0 / n1 + 1.0 / n2).sqrt());
        best = best.max(t);
    }
    best
}

impl LabelerState {
    pub fn new(cfg: LabelerConfig) -> Self {
        LabelerState { cfg, model: None, last_change_idx: 0, start_idx: 0, context: VecDeque::new() }
    }

    pub fn model(&self) -> Option<&LabelingModel> {
        self.model.as_ref()
    }

    /// Labels one batch of smoothed SNR values. `raw` holds the unsmoothed
    /// SNR for the same indices.
    pub fn label_batch(&mut self, batch: &Batch, raw: &[f64]) -> BatchOutcome {
        assert_eq!(batch.len(), raw.len(), "raw and smoothed batch lengths differ");
        let outcome = match standard_scale(batch) {
            Err(PrepError::DegenerateBatch) | Err(_) => BatchOutcome {
                labels: vec![None; batch.len()],
                decision: BatchDecision::Degenerate,
                arc: None,
                shift_t: None,
            },
            Ok(scaled) => {
                let arc = arc_of(&scaled.values).expect("batch has at least 2 values");
                let mut shift_t = None;
                let mut decision = None;
                if arc.abs() > self.cfg.tau {
                    let (smoothed_win, raw_win, win_start) = self.fit_window(batch, raw);
                    let t = level_shift_statistic(&raw_win, self.cfg.min_segment);
                    shift_t = Some(t);
                    if t >= self.cfg.min_shift_t {
                        if let Some(model) = self.fit(&smoothed_win, (win_start, batch.end_idx)) {
                            self.model = Some(model);
                            self.last_change_idx = batch.end_idx;
                            decision = Some(BatchDecision::Refit);
                        }
                    }
                }
                let decision =
                    decision.unwrap_or(if self.model.is_some() { BatchDecision::Reused } else { BatchDecision::Held });
                let labels = match &self.model {
                    Some(m) => batch.values.iter().map(|&v| Some(m.label(v))).collect(),
                    None => vec![None; batch.len()],
                };
                BatchOutcome { labels, decision, arc: Some(arc), shift_t }
            }
        };
        self.push_context(batch, raw);
        self.start_idx = batch.end_idx;
        outcome
    }

    fn fit_window(&self, batch: &Batch, raw: &[f64]) -> (Vec<f64>, Vec<f64>, usize) {
        let mut smoothed = Vec::new();
        let mut raw_win = Vec::new();
        let mut start = batch.start_idx;
        // Only batches that end exactly where the next begins are joined.
        let mut expected_end = batch.start_idx;
        let usable: Vec<&ContextBatch> = self
            .context
            .iter()
            .rev()
            .take_while(|c| {
                let ok = c.end == expected_end;
                expected_end = c.start;
                ok
            })
            .collect();
        for c in usable.into_iter().rev() {
            start = start.min(c.start);
            smoothed.extend_from_slice(&c.smoothed);
            raw_win.extend_from_slice(&c.raw);
        }
        smoothed.extend_from_slice(&batch.values);
        raw_win.extend_from_slice(raw);
        (smoothed, raw_win, start)
    }

    fn fit(&self, smoothed: &[f64], range: (usize, usize)) -> Option<LabelingModel> {
        let scaler = Scaler::fit(smoothed).ok()?;
        let z: Vec<f64> = smoothed.iter().map(|&v| scaler.transform(v)).collect();
        let fit = em_fit(&z, &self.cfg.em).ok()?;
        Some(LabelingModel::from_gmm(scaler, fit.model, range))
    }

    fn push_context(&mut self, batch: &Batch, raw: &[f64]) {
        if self.cfg.context_batches == 0 {
            return;
        }
        self.context.push_back(ContextBatch {
            start: batch.start_idx,
            end: batch.end_idx,
            smoothed: batch.values.clone(),
            raw: raw.to_vec(),
        });
        while self.context.len() > self.cfg.context_batches {
            self.context.pop_front();
        }
    }
}

/// Incremental labeler over a live sample stream. A batch is labelled as
/// soon as enough look-ahead exists for its smoothed values to be final, so
/// the output is identical to smoothing the whole stream at once.
#[derive(Debug, Clone)]
pub struct StreamLabeler {
    state: LabelerState,
    /// Stream index of `pending[0]` and `raw[0]`.
    base: usize,
    pending: VecDeque<KpiSample>,
    raw: VecDeque<f64>,
    next_start: usize,
    batch_id: u64,
    decisions: Vec<BatchDecision>,
}

impl StreamLabeler {
    pub fn new(cfg: LabelerConfig) -> Self {
        StreamLabeler {
            state: LabelerState::new(cfg),
            base: 0,
            pending: VecDeque::new(),
            raw: VecDeque::new(),
            next_start: 0,
            batch_id: 0,
            decisions: Vec::new(),
        }
    }

    pub fn state(&self) -> &LabelerState {
        &self.state
    }

    /// Per-batch decisions so far, in order.
    pub fn decisions(&self) -> &[BatchDecision] {
        &self.decisions
    }

    /// Samples consumed so far.
    pub fn len(&self) -> usize {
        self.base + self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, sample: KpiSample) -> Vec<LabeledSample> {
        self.pending.push_back(sample);
        self.raw.push_back(sample.ul_snr);
        let mut out = Vec::new();
        let lookahead = self.state.cfg.smoothing.half_width();
        while self.len() >= self.next_start + self.state.cfg.batch_size + lookahead {
            self.process_next(&mut out, false);
        }
        out
    }

    /// Labels the remaining complete batches, padding the stream end with its
    /// last value. A trailing partial batch is left unlabelled.
    pub fn finish(&mut self) -> Vec<LabeledSample> {
        let mut out = Vec::new();
        while self.len() >= self.next_start + self.state.cfg.batch_size {
            self.process_next(&mut out, true);
        }
        out
    }

    fn smoothed_at(&self, i: usize, at_end: bool) -> f64 {
        let h = self.state.cfg.smoothing.half_width() as isize;
        let last = self.len() as isize - 1;
        let sum: f64 = (i as isize - h..=i as isize + h)
            .map(|j| {
                let j = j.clamp(0, last) as usize;
                debug_assert!(at_end || j as isize <= last);
                self.raw[j - self.base]
            })
            .sum();
        sum / self.state.cfg.smoothing.window_w as f64
    }

    fn process_next(&mut self, out: &mut Vec<LabeledSample>, at_end: bool) {
        let b = self.state.cfg.batch_size;
        let start = self.next_start;
        let smoothed: Vec<f64> = (start..start + b).map(|i| self.smoothed_at(i, at_end)).collect();
        let raw: Vec<f64> = (start..start + b).map(|i| self.raw[i - self.base]).collect();
        let batch = Batch::new(smoothed, start).expect("batch_size >= 2");
        let outcome = self.state.label_batch(&batch, &raw);
        self.decisions.push(outcome.decision);
        for (i, label) in (start..start + b).zip(outcome.labels) {
            out.push(LabeledSample {
                sample: self.pending[i - self.base],
                label,
                source: LabelSource::AutoGmm,
                batch_id: self.batch_id,
            });
        }
        self.batch_id += 1;
        self.next_start += b;
        self.trim();
    }

    fn trim(&mut self) {
        let keep_from = self.next_start.saturating_sub(self.state.cfg.smoothing.half_width());
        while self.base < keep_from && !self.raw.is_empty() {
            self.raw.pop_front();
            self.pending.pop_front();
            self.base += 1;
        }
    }
}

/// Labels a complete stream.
pub fn run_labeler(stream: &[KpiSample], cfg: &LabelerConfig) -> Vec<LabeledSample> {
    let mut labeler = StreamLabeler::new(cfg.clone());
    let mut out = Vec::with_capacity(stream.len());
    for s in stream {
        out.extend(labeler.push(*s));
    }
    out.extend(labeler.finish());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::moving_average;
    use crate::sim::{generate_stream, SimConfig};
    use crate::telemetry::{ScenarioPhase, ScenarioSchedule};

    fn snr_of(stream: &[crate::sim::SimSample]) -> Vec<f64> {
        stream.iter().map(|s| s.sample.ul_snr).collect()
    }

    #[test]
    fn transition_batch_is_labelled_by_a_fresh_model() {
        // OFF for 12 s then a -8 dB jammer; the batch [90, 120) straddles the step at 105.
        let sched = ScenarioSchedule::new(vec![ScenarioPhase::off(10.5, 0.1), ScenarioPhase::on(10.5, -8.0, 0.1)]);
        let stream = generate_stream(&sched, &SimConfig::with_seed(11)).unwrap();
        let raw = snr_of(&stream);
        let smoothed = moving_average(&raw, &SmoothingConfig::default()).unwrap();

        let mut st = LabelerState::new(LabelerConfig::default());
        let flat = Batch::new(smoothed[60..90].to_vec(), 60).unwrap();
        let first = st.label_batch(&flat, &raw[60..90]);
        assert_eq!(first.decision, BatchDecision::Held);
        assert!(first.labels.iter().all(Option::is_none));

        let straddle = Batch::new(smoothed[90..120].to_vec(), 90).unwrap();
        let out = st.label_batch(&straddle, &raw[90..120]);
        assert!(out.arc.unwrap().abs() > 0.0004);
        assert_eq!(out.decision, BatchDecision::Refit);
        assert_eq!(st.last_change_idx, 120);
        let correct = out.labels.iter().zip(&stream[90..120]).filter(|(l, s)| **l == Some(s.truth)).count();
        assert!(correct >= 27, "{correct}/30");

        // A later flat ON batch is labelled by the stored model.
        let on = Batch::new(smoothed[150..180].to_vec(), 150).unwrap();
        let out = st.label_batch(&on, &raw[150..180]);
        assert_ne!(out.decision, BatchDecision::Held);
        assert!(out.labels.iter().all(|l| *l == Some(Label::Interference)));
    }

    #[test]
    fn flat_batch_after_model_is_clean() {
        let sched = ScenarioSchedule::new(vec![ScenarioPhase::on(9.0, -8.0, 0.1), ScenarioPhase::off(30.0, 0.1)]);
        let stream = generate_stream(&sched, &SimConfig::with_seed(5)).unwrap();
        let labels = run_labeler(&stream.iter().map(|s| s.sample).collect::<Vec<_>>(), &LabelerConfig::default());
        // batches after the first OFF batch: all 0
        for ls in labels.iter().filter(|l| l.sample.timestamp_ms >= 12_000) {
            assert_eq!(ls.label, Some(Label::NoInterference), "ts {}", ls.sample.timestamp_ms);
        }
    }

    #[test]
    fn degenerate_batch_is_held() {
        let mut st = LabelerState::new(LabelerConfig::default());
        let b = Batch::new(vec![20.0; 30], 0).unwrap();
        let out = st.label_batch(&b, &[20.0; 30]);
        assert_eq!(out.decision, BatchDecision::Degenerate);
        assert!(out.labels.iter().all(Option::is_none));
    }

    #[test]
    fn short_stream_emits_nothing() {
        let sched = ScenarioSchedule::new(vec![ScenarioPhase::off(2.0, 0.1)]);
        let stream = generate_stream(&sched, &SimConfig::default()).unwrap();
        let samples: Vec<_> = stream.iter().map(|s| s.sample).collect();
        assert!(run_labeler(&samples, &LabelerConfig::default()).is_empty());
    }

    #[test]
    fn pure_off_stream_never_labels_interference() {
        let sched = ScenarioSchedule::new(vec![ScenarioPhase::off(120.0, 0.33)]);
        let stream = generate_stream(&sched, &SimConfig::with_seed(2)).unwrap();
        let samples: Vec<_> = stream.iter().map(|s| s.sample).collect();
        let labels = run_labeler(&samples, &LabelerConfig::default());
        assert_eq!(labels.len(), 1200);
        assert!(labels.iter().all(|l| l.label != Some(Label::Interference)));
    }

    #[test]
    fn streaming_matches_whole_series_smoothing() {
        let sched = crate::sim::evaluation_schedule(7.7);
        let stream = generate_stream(&sched, &SimConfig::with_seed(8)).unwrap();
        let samples: Vec<_> = stream.iter().map(|s| s.sample).collect();
        let cfg = LabelerConfig::default();
        let streamed = run_labeler(&samples, &cfg);

        let raw = snr_of(&stream);
        let smoothed = moving_average(&raw, &cfg.smoothing).unwrap();
        let mut st = LabelerState::new(cfg.clone());
        let mut offline = Vec::new();
        let mut s = 0;
        while s + cfg.batch_size <= raw.len() {
            let b = Batch::new(smoothed[s..s + cfg.batch_size].to_vec(), s).unwrap();
            offline.extend(st.label_batch(&b, &raw[s..s + cfg.batch_size]).labels);
            s += cfg.batch_size;
        }
        assert_eq!(streamed.len(), offline.len());
        for (a, b) in streamed.iter().zip(&offline) {
            assert_eq!(a.label, *b);
        }
        assert!(streamed.windows(2).all(|w| w[0].sample.timestamp_ms < w[1].sample.timestamp_ms));
    }

    #[test]
    fn labels_ignore_component_order() {
        let gmm = Gmm1d { weights: [0.4, 0.6], means: [-1.0, 0.8], variances: [0.2, 0.5] };
        let scaler = Scaler { mean: 18.0, std: 4.0 };
        let a = LabelingModel::from_gmm(scaler, gmm, (0, 60));
        let b = LabelingModel::from_gmm(scaler, gmm.swapped(), (0, 60));
        for i in 0..200 {
            let x = 5.0 + i as f64 * 0.1;
            assert_eq!(a.label(x), b.label(x), "x={x}");
        }
        assert_eq!(a.label(0.0), Label::Interference);
        assert_eq!(a.label(40.0), Label::NoInterference);
    }

    #[test]
    fn trigger_ignores_constant_offset() {
        let raw: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() + if i > 14 { 3.0 } else { 0.0 }).collect();
        let shifted: Vec<f64> = raw.iter().map(|v| v + 42.0).collect();
        let mut a = LabelerState::new(LabelerConfig::default());
        let mut b = LabelerState::new(LabelerConfig::default());
        let oa = a.label_batch(&Batch::new(raw.clone(), 0).unwrap(), &raw);
        let ob = b.label_batch(&Batch::new(shifted.clone(), 0).unwrap(), &shifted);
        assert_eq!(oa.decision, ob.decision);
        assert!((oa.arc.unwrap() - ob.arc.unwrap()).abs() < 1e-9);
        assert_eq!(oa.labels, ob.labels);
    }

    #[test]
    fn level_shift_statistic_behaviour() {
        let flat = vec![1.0; 20];
        assert_eq!(level_shift_statistic(&flat, 3), 0.0);
        let mut step = vec![0.0; 30];
        step.extend(vec![5.0; 30]);
        assert!(level_shift_statistic(&step, 3) > 1e6);
        assert_eq!(level_shift_statistic(&[1.0, 2.0], 3), 0.0);
    }
}
