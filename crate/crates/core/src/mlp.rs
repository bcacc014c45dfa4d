//! Dense 60-32-16-8-2 interference detector trained with mini-batch RMSprop
//! on softmax cross-entropy, plus feature windows and the model file format.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::telemetry::{KpiSample, Label, LabeledSample};

pub const WINDOW_STEPS: usize = 15;
pub const CHANNELS: usize = 4;
pub const INPUT_DIM: usize = WINDOW_STEPS * CHANNELS;
pub const ARCH: [usize; 5] = [INPUT_DIM, 32, 16, 8, 2];

pub const MODEL_FORMAT: &str = "sajd-mlp";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("expected input of length {expected}, got {got}")]
    ShapeError { expected: usize, got: usize },
    #[error("not enough training data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed model file: {0}")]
    FormatError(String),
    #[error("unsupported model format version {0}")]
    VersionError(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 15 consecutive samples flattened oldest first, `[snr, mcs, bitrate, bler]`
/// per step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub values: [f64; INPUT_DIM],
    pub label: Option<Label>,
}

impl FeatureWindow {
    pub fn from_samples(samples: &[KpiSample], label: Option<Label>) -> Result<Self, MlpError> {
        if samples.len() != WINDOW_STEPS {
            return Err(MlpError::ShapeError { expected: WINDOW_STEPS, got: samples.len() });
        }
        let mut values = [0.0; INPUT_DIM];
        for (chunk, s) in values.chunks_exact_mut(CHANNELS).zip(samples) {
            chunk.copy_from_slice(&[s.ul_snr, s.ul_mcs as f64, s.ul_bitrate, s.ul_bler]);
        }
        Ok(FeatureWindow { values, label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub steps: usize,
    pub stride: usize,
    /// Consecutive samples further apart than this are not joined into one
    /// window.
    pub max_step_ms: Option<u64>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { steps: WINDOW_STEPS, stride: 1, max_step_ms: None }
    }
}

/// Sliding training windows over labelled samples. A window takes the label
/// of its newest sample; windows touching a held sample or a timestamp gap
/// are skipped.
pub fn build_windows(labeled: &[LabeledSample], cfg: &WindowConfig) -> Result<Vec<FeatureWindow>, MlpError> {
    assert_eq!(cfg.steps, WINDOW_STEPS, "feature windows are fixed at {WINDOW_STEPS} steps");
    assert!(cfg.stride >= 1);
    let mut out = Vec::new();
    let mut run_start = 0;
    let mut samples: Vec<KpiSample> = Vec::with_capacity(WINDOW_STEPS);
    for i in 0..labeled.len() {
        let broken = labeled[i].label.is_none()
            || (i > 0
                && cfg.max_step_ms.is_some_and(|m| {
                    labeled[i].sample.timestamp_ms.saturating_sub(labeled[i - 1].sample.timestamp_ms) > m
                }));
        if labeled[i].label.is_none() {
            run_start = i + 1;
            continue;
        }
        if broken {
            run_start = i;
        }
        if i + 1 >= run_start + WINDOW_STEPS && (i + 1 - WINDOW_STEPS) % cfg.stride == 0 {
            samples.clear();
            samples.extend(labeled[i + 1 - WINDOW_STEPS..=i].iter().map(|l| l.sample));
            out.push(FeatureWindow::from_samples(&samples, labeled[i].label)?);
        }
    }
    if out.is_empty() {
        return Err(MlpError::InsufficientData { needed: WINDOW_STEPS, got: labeled.len() });
    }
    Ok(out)
}

/// Per-channel input normalization fitted on training windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }

    /// A constant channel gets std 1 so it maps to zero.
    pub fn fit(windows: &[FeatureWindow]) -> Self {
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let n = (windows.len() * WINDOW_STEPS) as f64;
        for w in windows {
            for chunk in w.values.chunks_exact(CHANNELS) {
                for c in 0..CHANNELS {
                    sum[c] += chunk[c];
                }
            }
        }
        let mean = sum.map(|s| s / n);
        for w in windows {
            for chunk in w.values.chunks_exact(CHANNELS) {
                for c in 0..CHANNELS {
                    sq[c] += (chunk[c] - mean[c]).powi(2);
                }
            }
        }
        let std = sq.map(|s| {
            let v = (s / n).sqrt();
            if v > 1e-9 {
                v
            } else {
                1.0
            }
        });
        NormStats { mean, std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| (v - self.mean[i % CHANNELS]) / self.std[i % CHANNELS]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: u32,
    pub trained_at_ms: u64,
    /// Timestamp range `[start, end)` of the training samples.
    pub train_range: (u64, u64),
    /// Accuracy on the training windows.
    pub eval_accuracy: f64,
    pub parent_version: Option<u32>,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta { version: 0, trained_at_ms: 0, train_range: (0, 0), eval_accuracy: 0.0, parent_version: None }
    }
}

/// Fully connected layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Layer { n_in, n_out, weights: vec![0.0; n_in * n_out], biases: vec![0.0; n_out] }
    }

    fn he_uniform(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / n_in as f64).sqrt();
        let weights = (0..n_in * n_out).map(|_| rng.random_range(-limit..limit)).collect();
        Layer { n_in, n_out, weights, biases: vec![0.0; n_out] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.n_in)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub norm: NormStats,
    pub meta: ModelMeta,
}

/// Activations of one forward pass, kept for backpropagation.
struct Trace {
    /// `acts[0]` is the normalized input, `acts[l + 1]` the output of layer l
    /// (post-ReLU for hidden layers, logits for the last).
    acts: Vec<Vec<f64>>,
}

fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    let s = a + b;
    [a / s, b / s]
}

impl MlpModel {
    pub fn new_seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = ARCH.windows(2).map(|p| Layer::he_uniform(p[0], p[1], &mut rng)).collect();
        MlpModel { layers, norm: NormStats::identity(), meta: ModelMeta::default() }
    }

    pub fn zeros() -> Self {
        let layers = ARCH.windows(2).map(|p| Layer::zeros(p[0], p[1])).collect();
        MlpModel { layers, norm: NormStats::identity(), meta: ModelMeta::default() }
    }

    pub fn version(&self) -> u32 {
        self.meta.version
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.norm.apply(x));
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.n_out);
            layer.apply(&acts[l], &mut out);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        Trace { acts }
    }

    fn check_input(x: &[f64]) -> Result<(), MlpError> {
        if x.len() != INPUT_DIM {
            return Err(MlpError::ShapeError { expected: INPUT_DIM, got: x.len() });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2], MlpError> {
        Self::check_input(x)?;
        let t = self.trace(x);
        let z = t.acts.last().unwrap();
        Ok([z[0], z[1]])
    }

    /// Class probabilities `[p_no_interference, p_interference]`.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; 2], MlpError> {
        self.logits(x).map(|z| softmax2(&z))
    }

    pub fn predict(&self, x: &[f64]) -> Result<(Label, f64), MlpError> {
        let p = self.forward(x)?;
        let label = if p[1] > p[0] { Label::Interference } else { Label::NoInterference };
        Ok((label, p[1]))
    }

    /// Fraction of labelled windows predicted correctly.
    pub fn accuracy(&self, windows: &[FeatureWindow]) -> f64 {
        let labelled: Vec<_> = windows.iter().filter_map(|w| w.label.map(|l| (w, l))).collect();
        if labelled.is_empty() {
            return 0.0;
        }
        let correct =
            labelled.iter().filter(|(w, l)| self.predict(&w.values).map(|(p, _)| p == *l).unwrap_or(false)).count();
        correct as f64 / labelled.len() as f64
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, x: &[f64], label: Label) -> Result<f64, MlpError> {
        let p = self.forward(x)?;
        Ok(-p[label.as_index()].max(f64::MIN_POSITIVE).ln())
    }

    /// Adds d(loss)/d(param) for one sample into `grads` (same layout as the
    /// layers) and returns the sample loss.
    fn backprop(&self, x: &[f64], label: Label, grads: &mut [Layer]) -> f64 {
        let t = self.trace(x);
        let p = softmax2(t.acts.last().unwrap());
        let y = label.as_index();
        let loss = -p[y].max(f64::MIN_POSITIVE).ln();
        let mut delta: Vec<f64> = (0..2).map(|k| p[k] - if k == y { 1.0 } else { 0.0 }).collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &t.acts[l];
            let g = &mut grads[l];
            for (o, d) in delta.iter().enumerate() {
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (gw, v) in row.iter_mut().zip(input) {
                    *gw += d * v;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.n_in];
                for (o, d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                    for (pv, w) in prev.iter_mut().zip(row) {
                        *pv += d * w;
                    }
                }
                // ReLU derivative, taken as 0 at the kink.
                for (pv, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *pv = 0.0;
                    }
                }
                delta = prev;
            }
        }
        loss
    }

    fn zero_like(&self) -> Vec<Layer> {
        self.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.weights.len() {
                return &mut l.weights[i];
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                return &mut l.biases[i];
            }
            i -= l.biases.len();
        }
        panic!("parameter index out of range")
    }

    /// Sample loss plus the hidden-unit on/off pattern, used to spot finite
    /// differences that straddle a ReLU kink.
    fn loss_and_pattern(&self, x: &[f64], label: Label) -> (f64, Vec<bool>) {
        let t = self.trace(x);
        let p = softmax2(t.acts.last().unwrap());
        let pattern = t.acts[1..t.acts.len() - 1].iter().flatten().map(|v| *v > 0.0).collect();
        (-p[label.as_index()].max(f64::MIN_POSITIVE).ln(), pattern)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Largest |analytic| and |numeric| over parameters whose gradient is
    /// exactly zero analytically.
    pub max_abs_on_zero: f64,
    pub checked: usize,
    /// Parameters skipped because the ±h perturbation changed which hidden
    /// units are active, so the central difference is not a derivative.
    pub skipped_at_kink: usize,
}

/// Compares backprop gradients with central differences (h = 1e-5) for
/// every parameter. Relative error is `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn gradient_check(m: &MlpModel, x: &[f64], label: Label) -> Result<GradCheck, MlpError> {
    MlpModel::check_input(x)?;
    const H: f64 = 1e-5;
    let mut grads = m.zero_like();
    m.backprop(x, label, &mut grads);
    let analytic: Vec<f64> = grads.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect();
    let (_, base_pattern) = m.loss_and_pattern(x, label);

    let mut probe = m.clone();
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_on_zero: 0.0, checked: 0, skipped_at_kink: 0 };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + H;
        let (plus, pat_plus) = probe.loss_and_pattern(x, label);
        *probe.param_mut(i) = orig - H;
        let (minus, pat_minus) = probe.loss_and_pattern(x, label);
        *probe.param_mut(i) = orig;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped_at_kink += 1;
            continue;
        }
        let n = (plus - minus) / (2.0 * H);
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
        report.max_rel_error = report.max_rel_error.max(rel);
        if a == 0.0 {
            report.max_abs_on_zero = report.max_abs_on_zero.max(n.abs());
        }
        report.checked += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.01, epochs: 50, batch_size: 64, rms_decay: 0.9, rms_epsilon: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        if !(self.learning_rate > 0.0) {
            return Err(MlpError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MlpError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_epsilon > 0.0) {
            return Err(MlpError::InvalidConfig("rms_decay must be in [0, 1) and rms_epsilon > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpModel,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh seeded model. `meta.eval_accuracy` is set to the final
/// accuracy on `data`; the remaining metadata is left for the caller.
pub fn train(data: &[FeatureWindow], cfg: &TrainConfig) -> Result<Trained, MlpError> {
    cfg.validate()?;
    let labelled: Vec<(&[f64; INPUT_DIM], Label)> =
        data.iter().filter_map(|w| w.label.map(|l| (&w.values, l))).collect();
    if labelled.len() < cfg.batch_size {
        return Err(MlpError::InsufficientData { needed: cfg.batch_size, got: labelled.len() });
    }
    let first = labelled[0].1;
    if labelled.iter().all(|(_, l)| *l == first) {
        return Err(MlpError::SingleClassData);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::new_seeded(rng.random());
    model.norm = NormStats::fit(data);
    let mut cache: Vec<f64> = vec![0.0; model.param_count()];
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grads = model.zero_like();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in grads.iter_mut() {
                g.weights.iter_mut().for_each(|v| *v = 0.0);
                g.biases.iter_mut().for_each(|v| *v = 0.0);
            }
            for &i in batch {
                let (x, y) = labelled[i];
                total += model.backprop(x, y, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            let flat_grads = grads.iter().flat_map(|l| l.weights.iter().chain(&l.biases));
            for ((p, g), c) in model.params_mut().zip(flat_grads).zip(cache.iter_mut()) {
                let g = g * scale;
                *c = cfg.rms_decay * *c + (1.0 - cfg.rms_decay) * g * g;
                *p -= cfg.learning_rate * g / (c.sqrt() + cfg.rms_epsilon);
            }
        }
        epoch_losses.push(total / labelled.len() as f64);
    }
    model.meta.eval_accuracy = model.accuracy(data);
    Ok(Trained { model, epoch_losses })
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    format_version: u32,
    arch: Vec<usize>,
    meta: ModelMeta,
    payload_sha256: String,
}

fn payload(m: &MlpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity((m.param_count() + 2 * CHANNELS) * 8);
    for l in &m.layers {
        for v in l.weights.iter().chain(&l.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in m.norm.mean.iter().chain(&m.norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serialized model: one JSON header line, then little-endian f64 weights
/// (per layer: weights row-major, then biases), then channel means and stds.
pub fn encode_model(m: &MlpModel) -> Vec<u8> {
    let body = payload(m);
    let header = FileHeader {
        format: MODEL_FORMAT.into(),
        format_version: MODEL_FORMAT_VERSION,
        arch: ARCH.to_vec(),
        meta: m.meta.clone(),
        payload_sha256: hex::encode(Sha256::digest(&body)),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&body);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpModel, MlpError> {
    let nl =
        bytes.iter().position(|&b| b == b'\n').ok_or_else(|| MlpError::FormatError("missing header line".into()))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| MlpError::FormatError(format!("header: {e}")))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
        return Err(MlpError::FormatError("not a sajd-mlp file".into()));
    }
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| MlpError::FormatError("missing format_version".into()))?;
    if version != MODEL_FORMAT_VERSION as u64 {
        return Err(MlpError::VersionError(version.min(u32::MAX as u64) as u32));
    }
    let header: FileHeader = serde_json::from_value(raw).map_err(|e| MlpError::FormatError(format!("header: {e}")))?;
    if header.arch != ARCH {
        return Err(MlpError::FormatError(format!("unsupported architecture {:?}", header.arch)));
    }
    let body = &bytes[nl + 1..];
    if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
        return Err(MlpError::FormatError("payload checksum mismatch".into()));
    }
    let mut model = MlpModel::zeros();
    let expected = (model.param_count() + 2 * CHANNELS) * 8;
    if body.len() != expected {
        return Err(MlpError::FormatError(format!("payload is {} bytes, expected {expected}", body.len())));
    }
    let mut floats = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for p in model.params_mut() {
        *p = floats.next().unwrap();
    }
    for v in model.norm.mean.iter_mut().chain(model.norm.std.iter_mut()) {
        *v = floats.next().unwrap();
    }
    if model.norm.std.iter().any(|s| !(*s > 0.0)) {
        return Err(MlpError::FormatError("non-positive channel std".into()));
    }
    model.meta = header.meta;
    Ok(model)
}

/// Writes via a temporary sibling and rename, so readers never see a partial
/// file.
pub fn save_model(m: &MlpModel, path: &Path) -> Result<(), MlpError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_model(m))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel, MlpError> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::LabelSource;
    use proptest::prelude::*;
    use rand::Rng;

    fn labeled(n: usize, label: impl Fn(usize) -> Option<Label>) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| LabeledSample {
                sample: KpiSample {
                    timestamp_ms: i as u64 * 100,
                    ul_snr: 20.0 + i as f64,
                    ul_mcs: 20,
                    ul_bitrate: 15.0,
                    ul_bler: 0.05,
                },
                label: label(i),
                source: LabelSource::AutoGmm,
                batch_id: 0,
            })
            .collect()
    }

    fn random_input(rng: &mut ChaCha8Rng) -> [f64; INPUT_DIM] {
        std::array::from_fn(|_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn window_counts_and_labels() {
        let cfg = WindowConfig::default();
        assert_eq!(build_windows(&labeled(15, |_| Some(Label::NoInterference)), &cfg).unwrap().len(), 1);
        assert_eq!(build_windows(&labeled(100, |_| Some(Label::NoInterference)), &cfg).unwrap().len(), 86);
        let w = build_windows(&labeled(15, |i| Some(Label::from_index((i == 14) as usize))), &cfg).unwrap();
        assert_eq!(w[0].label, Some(Label::Interference));
        // oldest step first, channel order snr, mcs, bitrate, bler
        assert_eq!(&w[0].values[..4], &[20.0, 20.0, 15.0, 0.05]);
        assert_eq!(w[0].values[56], 34.0);
        assert!(matches!(
            build_windows(&labeled(14, |_| Some(Label::Interference)), &cfg),
            Err(MlpError::InsufficientData { .. })
        ));
    }

    #[test]
    fn windows_skip_holds_and_gaps() {
        let cfg = WindowConfig { max_step_ms: Some(500), ..Default::default() };
        let data = labeled(40, |i| if i == 20 { None } else { Some(Label::NoInterference) });
        // runs [0,20) and [21,40): 6 + 5 windows
        assert_eq!(build_windows(&data, &cfg).unwrap().len(), 11);
        let mut gapped = labeled(40, |_| Some(Label::NoInterference));
        for s in gapped.iter_mut().skip(25) {
            s.sample.timestamp_ms += 10_000;
        }
        // runs [0,25) and [25,40): 11 + 1 windows
        assert_eq!(build_windows(&gapped, &cfg).unwrap().len(), 12);
        let stride = WindowConfig { stride: 5, ..Default::default() };
        assert_eq!(build_windows(&labeled(100, |_| Some(Label::Interference)), &stride).unwrap().len(), 18);
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = MlpModel::zeros().forward(&[1.0; INPUT_DIM]).unwrap();
        assert_eq!(p, [0.5, 0.5]);
        assert!(matches!(MlpModel::zeros().forward(&[0.0; 59]), Err(MlpError::ShapeError { expected: 60, got: 59 })));
    }

    #[test]
    fn seeded_forward_is_bit_identical() {
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(1));
        let a = MlpModel::new_seeded(9).forward(&x).unwrap();
        let b = MlpModel::new_seeded(9).forward(&x).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn gradient_check_small_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MlpModel::new_seeded(4);
        let x = random_input(&mut rng);
        let a = gradient_check(&m, &x, Label::Interference).unwrap();
        let b = gradient_check(&m, &x, Label::Interference).unwrap();
        assert_eq!(a, b);
        assert!(a.max_rel_error < 1e-4, "{a:?}");
        assert!(a.checked > a.param_count_hint() / 2);
    }

    impl GradCheck {
        fn param_count_hint(&self) -> usize {
            self.checked + self.skipped_at_kink
        }
    }

    #[test]
    fn dead_unit_has_zero_gradient() {
        let mut m = MlpModel::new_seeded(2);
        // Hidden unit 0 of the first layer can never activate.
        m.layers[0].weights[..INPUT_DIM].iter_mut().for_each(|w| *w = 0.0);
        m.layers[0].biases[0] = -1.0;
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(3));
        let mut grads = m.zero_like();
        m.backprop(&x, Label::NoInterference, &mut grads);
        assert!(grads[0].weights[..INPUT_DIM].iter().all(|g| *g == 0.0));
        let r = gradient_check(&m, &x, Label::NoInterference).unwrap();
        assert!(r.max_abs_on_zero < 1e-7, "{r:?}");
    }

    fn separable(n: usize, seed: u64) -> Vec<FeatureWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = Label::from_index(i % 2);
                let (snr, mcs, rate) = if i % 2 == 0 { (25.0, 24.0, 19.5) } else { (8.0, 7.0, 5.0) };
                let values = std::array::from_fn(|k| match k % CHANNELS {
                    0 => snr + rng.random_range(-1.0..1.0),
                    1 => mcs,
                    2 => rate + rng.random_range(-0.5..0.5),
                    _ => rng.random_range(0.0..0.1),
                });
                FeatureWindow { values, label: Some(label) }
            })
            .collect()
    }

    #[test]
    fn training_learns_separable_data() {
        let data = separable(400, 1);
        let t = train(&data, &TrainConfig { epochs: 10, ..Default::default() }).unwrap();
        assert_eq!(t.epoch_losses.len(), 10);
        assert!(t.epoch_losses[9] < t.epoch_losses[0]);
        assert!(t.model.meta.eval_accuracy >= 0.99);
        assert!(t.model.norm.std.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn training_errors() {
        let mut one_class = separable(100, 2);
        one_class.iter_mut().for_each(|w| w.label = Some(Label::Interference));
        assert!(matches!(train(&one_class, &TrainConfig::default()), Err(MlpError::SingleClassData)));
        assert!(matches!(
            train(&separable(10, 2), &TrainConfig::default()),
            Err(MlpError::InsufficientData { needed: 64, got: 10 })
        ));
        let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(train(&separable(100, 2), &bad), Err(MlpError::InvalidConfig(_))));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut m = MlpModel::new_seeded(5);
        m.norm = NormStats { mean: [20.0, 18.0, 14.0, 0.1], std: [4.0, 5.0, 3.0, 0.2] };
        m.meta = ModelMeta {
            version: 3,
            trained_at_ms: 42,
            train_range: (0, 900),
            eval_accuracy: 0.97,
            parent_version: Some(2),
        };
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = random_input(&mut rng);
            assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        }
    }

    #[test]
    fn model_file_errors() {
        let bytes = encode_model(&MlpModel::new_seeded(1));
        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 0xff;
        assert!(matches!(decode_model(&corrupt), Err(MlpError::FormatError(_))));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 8]), Err(MlpError::FormatError(_))));
        assert!(matches!(decode_model(b"garbage"), Err(MlpError::FormatError(_))));

        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|b| *b == b'\n').unwrap()]).to_string();
        let future = text.replace("\"format_version\":1", "\"format_version\":2");
        let mut fb = future.into_bytes();
        fb.extend_from_slice(&bytes[text.len()..]);
        assert!(matches!(decode_model(&fb), Err(MlpError::VersionError(2))));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let m = MlpModel::new_seeded(seed);
            let x: [f64; INPUT_DIM] = std::array::from_fn(|i| ((i as f64 + seed as f64) * 0.37).sin() * scale);
            let p = m.forward(&x).unwrap();
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn argmax_survives_monotone_rescaling(a in -50.0f64..50.0, b in -50.0f64..50.0, k in 0.01f64..10.0, c in -5.0f64..5.0) {
            prop_assume!(a != b);
            let p = softmax2(&[a, b]);
            let q = softmax2(&[k * a + c, k * b + c]);
            prop_assert_eq!(p[1] > p[0], q[1] > q[0]);
            let q3 = softmax2(&[a.powi(3), b.powi(3)]);
            prop_assert_eq!(p[1] > p[0], q3[1] > q3[0]);
        }
    }
}
