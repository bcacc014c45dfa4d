//! Shared domain types and their canonical serialized forms.
//!
//! Every interface in the loop (stream socket, store files, model registry
//! notifications) speaks the types defined here. Samples travel as one JSON
//! object per line:
//!
//! ```text
//! {"ts":<int>,"ul_snr":<float>,"ul_mcs":<int>,"ul_bitrate":<float>,"ul_bler":<float>}
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest valid uplink MCS index (5G NR 64QAM table).
pub const MAX_MCS: u8 = 28;

/// Default KPI reporting period: 10 samples per second.
pub const DEFAULT_SAMPLE_PERIOD_MS: u64 = 100;

/// Jammer power used to encode "no interference" in scenario tables.
pub const INTERFERENCE_OFF_DB: f64 = -100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TelemetryError {
    #[error("{field} out of range: {value}")]
    Range { field: &'static str, value: f64 },
    #[error("malformed record: {0}")]
    Decode(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

impl TelemetryError {
    /// The offending field name for range errors.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            TelemetryError::Range { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// One timestamped uplink KPI tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpiSample {
    #[serde(rename = "ts")]
    pub timestamp_ms: u64,
    /// Uplink SNR in dB.
    pub ul_snr: f64,
    /// Uplink MCS index, 0..=28.
    pub ul_mcs: u8,
    /// Uplink bitrate in Mbps.
    pub ul_bitrate: f64,
    /// Uplink block error rate, a fraction in [0, 1].
    pub ul_bler: f64,
}

/// Checks every sample invariant in declaration order and reports the first
/// violated field.
pub fn validate_sample(raw: KpiSample) -> Result<KpiSample, TelemetryError> {
    if !raw.ul_snr.is_finite() {
        return Err(TelemetryError::Range { field: "ul_snr", value: raw.ul_snr });
    }
    if raw.ul_mcs > MAX_MCS {
        return Err(TelemetryError::Range { field: "ul_mcs", value: raw.ul_mcs as f64 });
    }
    if !(raw.ul_bitrate.is_finite() && raw.ul_bitrate >= 0.0) {
        return Err(TelemetryError::Range { field: "ul_bitrate", value: raw.ul_bitrate });
    }
    if !(0.0..=1.0).contains(&raw.ul_bler) {
        return Err(TelemetryError::Range { field: "ul_bler", value: raw.ul_bler });
    }
    Ok(raw)
}

// Decoding goes through a wider MCS type so that an out-of-range index is a
// range error rather than a parse error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSample {
    ts: u64,
    ul_snr: f64,
    ul_mcs: i64,
    ul_bitrate: f64,
    ul_bler: f64,
}

/// Encodes a sample as a single LF-terminated UTF-8 line.
pub fn encode_sample(s: &KpiSample) -> Vec<u8> {
    let mut out = serde_json::to_vec(s).expect("KpiSample always serializes");
    out.push(b'\n');
    out
}

/// Decodes one wire line (trailing newline optional) and validates it.
pub fn decode_sample(bytes: &[u8]) -> Result<KpiSample, TelemetryError> {
    let line = strip_eol(bytes);
    let wire: WireSample = serde_json::from_slice(line).map_err(|e| TelemetryError::Decode(e.to_string()))?;
    if !(0..=MAX_MCS as i64).contains(&wire.ul_mcs) {
        // Keep declaration order: a bad SNR is still reported first.
        if !wire.ul_snr.is_finite() {
            return Err(TelemetryError::Range { field: "ul_snr", value: wire.ul_snr });
        }
        return Err(TelemetryError::Range { field: "ul_mcs", value: wire.ul_mcs as f64 });
    }
    validate_sample(KpiSample {
        timestamp_ms: wire.ts,
        ul_snr: wire.ul_snr,
        ul_mcs: wire.ul_mcs as u8,
        ul_bitrate: wire.ul_bitrate,
        ul_bler: wire.ul_bler,
    })
}

fn strip_eol(bytes: &[u8]) -> &[u8] {
    let mut end = bytes.len();
    while end > 0 && matches!(bytes[end - 1], b'\n' | b'\r') {
        end -= 1;
    }
    &bytes[..end]
}

/// Binary interference label. Serialized as the integers 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    NoInterference = 0,
    Interference = 1,
}

impl Label {
    pub fn as_index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::NoInterference
        } else {
            Label::Interference
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::NoInterference),
            1 => Ok(Label::Interference),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    AutoGmm,
    GroundTruthSim,
}

/// A sample with its label. `label == None` is a held sample: the labeler
/// had no model yet, so the label is deferred and the sample never enters a
/// training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    #[serde(flatten)]
    pub sample: KpiSample,
    pub label: Option<Label>,
    pub source: LabelSource,
    pub batch_id: u64,
}

impl LabeledSample {
    pub fn is_held(&self) -> bool {
        self.label.is_none()
    }
}

/// Ground-truth sidecar record emitted next to simulated streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub ts: u64,
    pub label: Label,
}

/// One row of a jammer/noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPhase {
    pub duration_s: f64,
    #[serde(rename = "int_event")]
    pub interference_event: bool,
    #[serde(rename = "int_db")]
    pub interference_db: f64,
    #[serde(rename = "noise_amp")]
    pub noise_amplitude: f64,
}

impl ScenarioPhase {
    pub fn on(duration_s: f64, interference_db: f64, noise_amplitude: f64) -> Self {
        ScenarioPhase { duration_s, interference_event: true, interference_db, noise_amplitude }
    }

    pub fn off(duration_s: f64, noise_amplitude: f64) -> Self {
        ScenarioPhase { duration_s, interference_event: false, interference_db: INTERFERENCE_OFF_DB, noise_amplitude }
    }

    pub fn truth(&self) -> Label {
        if self.interference_event {
            Label::Interference
        } else {
            Label::NoInterference
        }
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(TelemetryError::Scenario(format!("phase duration must be positive, got {}", self.duration_s)));
        }
        if !self.interference_event && self.interference_db != INTERFERENCE_OFF_DB {
            return Err(TelemetryError::Scenario(format!(
                "interference OFF requires int_db = -100, got {}",
                self.interference_db
            )));
        }
        if !self.interference_db.is_finite() {
            return Err(TelemetryError::Scenario("int_db must be finite".into()));
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return Err(TelemetryError::Scenario(format!(
                "noise amplitude must be non-negative, got {}",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSchedule {
    pub phases: Vec<ScenarioPhase>,
    #[serde(default = "default_period")]
    pub sample_period_ms: u64,
}

fn default_period() -> u64 {
    DEFAULT_SAMPLE_PERIOD_MS
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScheduleFile {
    Bare(Vec<ScenarioPhase>),
    Full(ScenarioSchedule),
}

impl ScenarioSchedule {
    pub fn new(phases: Vec<ScenarioPhase>) -> Self {
        ScenarioSchedule { phases, sample_period_ms: DEFAULT_SAMPLE_PERIOD_MS }
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.phases.is_empty() {
            return Err(TelemetryError::Scenario("schedule has no phases".into()));
        }
        if self.sample_period_ms == 0 {
            return Err(TelemetryError::Scenario("sample period must be positive".into()));
        }
        self.phases.iter().try_for_each(ScenarioPhase::validate)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }

    /// Number of samples a phase contributes at this schedule's period.
    pub fn phase_len(&self, phase: &ScenarioPhase) -> usize {
        (phase.duration_s * 1000.0 / self.sample_period_ms as f64).round() as usize
    }

    /// Sample index at which each phase starts, plus the total as the last entry.
    pub fn phase_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.phases.len() + 1);
        let mut acc = 0;
        out.push(0);
        for p in &self.phases {
            acc += self.phase_len(p);
            out.push(acc);
        }
        out
    }

    /// Parses a schedule file: either a bare JSON array of phases or an
    /// object with `phases` and `sample_period_ms`.
    pub fn from_json_str(s: &str) -> Result<Self, TelemetryError> {
        let parsed: ScheduleFile = serde_json::from_str(s).map_err(|e| TelemetryError::Decode(e.to_string()))?;
        let sched = match parsed {
            ScheduleFile::Bare(phases) => ScenarioSchedule::new(phases),
            ScheduleFile::Full(s) => s,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// The bare-array file form.
    pub fn phases_to_json(&self) -> String {
        serde_json::to_string_pretty(&self.phases).expect("phases always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopEventKind {
    DriftDetected,
    RetrainStarted,
    RetrainCompleted,
    ModelSwapped,
    PeriodicRetrain,
}

impl std::fmt::Display for LoopEventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LoopEventKind::DriftDetected => "DriftDetected",
            LoopEventKind::RetrainStarted => "RetrainStarted",
            LoopEventKind::RetrainCompleted => "RetrainCompleted",
            LoopEventKind::ModelSwapped => "ModelSwapped",
            LoopEventKind::PeriodicRetrain => "PeriodicRetrain",
        };
        f.write_str(s)
    }
}

/// Audit record of closed-loop activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopEvent {
    #[serde(rename = "ts")]
    pub timestamp_ms: u64,
    pub kind: LoopEventKind,
    pub model_version: Option<u32>,
    pub detail: String,
}

impl LoopEvent {
    pub fn new(timestamp_ms: u64, kind: LoopEventKind, model_version: Option<u32>, detail: impl Into<String>) -> Self {
        LoopEvent { timestamp_ms, kind, model_version, detail: detail.into() }
    }
}

/// One detector output, as logged by the detection service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ts: u64,
    pub label: Label,
    /// Probability of interference.
    pub p1: f64,
    pub model_version: u32,
}

/// Checks the ordering contract of an event log: every `ModelSwapped` for
/// version v is preceded by a `RetrainCompleted` for v.
pub fn events_well_ordered(events: &[LoopEvent]) -> bool {
    let mut completed = std::collections::HashSet::new();
    for e in events {
        match (e.kind, e.model_version) {
            (LoopEventKind::RetrainCompleted, Some(v)) => {
                completed.insert(v);
            }
            (LoopEventKind::ModelSwapped, Some(v)) if !completed.contains(&v) => return false,
            (LoopEventKind::ModelSwapped, None) => return false,
            _ => {}
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_point() -> KpiSample {
        KpiSample { timestamp_ms: 0, ul_snr: 25.0, ul_mcs: 24, ul_bitrate: 20.0, ul_bler: 0.01 }
    }

    #[test]
    fn clean_operating_point_is_valid() {
        assert_eq!(validate_sample(clean_point()), Ok(clean_point()));
    }

    #[test]
    fn range_errors_name_the_field() {
        let bad_bler = KpiSample { ul_bler: 1.5, ..clean_point() };
        assert_eq!(validate_sample(bad_bler).unwrap_err().field(), Some("ul_bler"));
        let bad_mcs = KpiSample { ul_mcs: 29, ..clean_point() };
        assert_eq!(validate_sample(bad_mcs).unwrap_err().field(), Some("ul_mcs"));
        let bad_rate = KpiSample { ul_bitrate: -0.1, ..clean_point() };
        assert_eq!(validate_sample(bad_rate).unwrap_err().field(), Some("ul_bitrate"));
        // first violated field wins
        let both = KpiSample { ul_mcs: 40, ul_bler: 2.0, ..clean_point() };
        assert_eq!(validate_sample(both).unwrap_err().field(), Some("ul_mcs"));
    }

    #[test]
    fn wire_form_is_exact() {
        let line = encode_sample(&clean_point());
        assert_eq!(
            std::str::from_utf8(&line).unwrap(),
            "{\"ts\":0,\"ul_snr\":25.0,\"ul_mcs\":24,\"ul_bitrate\":20.0,\"ul_bler\":0.01}\n"
        );
        assert_eq!(decode_sample(&line).unwrap(), clean_point());
    }

    #[test]
    fn decode_rejects_malformed_lines() {
        let line = encode_sample(&clean_point());
        let truncated = &line[..line.len() / 2];
        assert!(matches!(decode_sample(truncated), Err(TelemetryError::Decode(_))));

        let renamed = String::from_utf8(line.clone()).unwrap().replace("ul_bler", "ul_bl3r");
        match decode_sample(renamed.as_bytes()) {
            Err(TelemetryError::Decode(msg)) => assert!(msg.contains("unknown field"), "{msg}"),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn decode_reports_range_errors() {
        let line = br#"{"ts":5,"ul_snr":20.0,"ul_mcs":29,"ul_bitrate":1.0,"ul_bler":0.1}"#;
        assert_eq!(decode_sample(line).unwrap_err().field(), Some("ul_mcs"));
        let line = br#"{"ts":5,"ul_snr":20.0,"ul_mcs":-1,"ul_bitrate":1.0,"ul_bler":0.1}"#;
        assert_eq!(decode_sample(line).unwrap_err().field(), Some("ul_mcs"));
        let line = br#"{"ts":5,"ul_snr":20.0,"ul_mcs":3,"ul_bitrate":1.0,"ul_bler":1.5}"#;
        assert_eq!(decode_sample(line).unwrap_err().field(), Some("ul_bler"));
    }

    #[test]
    fn labeled_sample_wire_form() {
        let ls = LabeledSample {
            sample: clean_point(),
            label: Some(Label::Interference),
            source: LabelSource::AutoGmm,
            batch_id: 3,
        };
        let s = serde_json::to_string(&ls).unwrap();
        assert!(s.contains("\"label\":1"));
        assert!(s.contains("\"source\":\"auto_gmm\""));
        let back: LabeledSample = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ls);

        let held = LabeledSample { label: None, ..ls };
        let s = serde_json::to_string(&held).unwrap();
        assert!(s.contains("\"label\":null"));
    }

    #[test]
    fn schedule_file_forms() {
        let bare = r#"[{"duration_s":60.0,"int_event":true,"int_db":-12.0,"noise_amp":0.1},
                       {"duration_s":60.0,"int_event":false,"int_db":-100.0,"noise_amp":0.1}]"#;
        let s = ScenarioSchedule::from_json_str(bare).unwrap();
        assert_eq!(s.phases.len(), 2);
        assert_eq!(s.sample_period_ms, 100);
        assert_eq!(s.total_duration_s(), 120.0);
        assert_eq!(s.phase_boundaries(), vec![0, 600, 1200]);
        let again = ScenarioSchedule::from_json_str(&s.phases_to_json()).unwrap();
        assert_eq!(again, s);

        let full = r#"{"phases":[{"duration_s":1.0,"int_event":false,"int_db":-100.0,"noise_amp":0.1}],
                       "sample_period_ms":50}"#;
        assert_eq!(ScenarioSchedule::from_json_str(full).unwrap().sample_period_ms, 50);
    }

    #[test]
    fn schedule_invariants() {
        assert!(ScenarioSchedule::from_json_str("[]").is_err());
        let off_with_power = r#"[{"duration_s":1.0,"int_event":false,"int_db":-8.0,"noise_amp":0.1}]"#;
        assert!(ScenarioSchedule::from_json_str(off_with_power).is_err());
        let zero_len = r#"[{"duration_s":0.0,"int_event":true,"int_db":-8.0,"noise_amp":0.1}]"#;
        assert!(ScenarioSchedule::from_json_str(zero_len).is_err());
    }

    #[test]
    fn event_ordering_check() {
        let ok = vec![
            LoopEvent::new(1, LoopEventKind::RetrainCompleted, Some(1), ""),
            LoopEvent::new(2, LoopEventKind::ModelSwapped, Some(1), ""),
        ];
        assert!(events_well_ordered(&ok));
        let bad = vec![LoopEvent::new(2, LoopEventKind::ModelSwapped, Some(2), "")];
        assert!(!events_well_ordered(&bad));
    }
}
