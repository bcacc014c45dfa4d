//! Seeded generator of uplink KPI streams under jammer/noise schedules.
//!
//! The model is deliberately small: each sample's SNR is the clean operating
//! point minus a jammer-power-dependent loss plus Gaussian noise whose spread
//! follows the phase's noise amplitude. MCS follows an EWMA of recent SNR
//! through a threshold table, BLER is a logistic function of the margin
//! between instantaneous SNR and the selected MCS threshold, and bitrate is
//! goodput proportional to MCS.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{
    KpiSample, Label, ScenarioPhase, ScenarioSchedule, TelemetryError, INTERFERENCE_OFF_DB, MAX_MCS,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Schedule(#[from] TelemetryError),
}

/// SNR (dB) required to select each MCS index; entry `m` is the threshold for MCS `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsTable {
    pub thresholds_db: Vec<f64>,
}

impl Default for McsTable {
    /// One dB per index, placing a 25 dB SNR at MCS 24.
    fn default() -> Self {
        McsTable { thresholds_db: (0..=MAX_MCS).map(|m| m as f64 + 1.0).collect() }
    }
}

impl McsTable {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.thresholds_db.len() != MAX_MCS as usize + 1 {
            return Err(SimError::Config(format!(
                "MCS table needs {} thresholds, got {}",
                MAX_MCS + 1,
                self.thresholds_db.len()
            )));
        }
        if self.thresholds_db.iter().any(|t| !t.is_finite()) {
            return Err(SimError::Config("MCS thresholds must be finite".into()));
        }
        if self.thresholds_db.windows(2).any(|w| w[1] < w[0]) {
            return Err(SimError::Config("MCS table must be non-decreasing in SNR".into()));
        }
        Ok(())
    }

    /// Highest MCS whose threshold the SNR meets; MCS 0 below the table.
    pub fn select(&self, snr_db: f64) -> u8 {
        let n = self.thresholds_db.partition_point(|&t| t <= snr_db);
        n.saturating_sub(1) as u8
    }

    pub fn threshold(&self, mcs: u8) -> f64 {
        self.thresholds_db[mcs as usize]
    }
}

/// Logistic BLER as a function of SNR margin over the MCS threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlerCurve {
    /// Margin (dB) at which BLER is 0.5.
    pub midpoint_db: f64,
    /// Steepness; must be positive so BLER falls as the margin grows.
    pub slope_per_db: f64,
}

impl Default for BlerCurve {
    /// BLER of about 0.01 at zero margin.
    fn default() -> Self {
        BlerCurve { midpoint_db: -2.5, slope_per_db: 1.84 }
    }
}

impl BlerCurve {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.slope_per_db.is_finite() && self.slope_per_db > 0.0) || !self.midpoint_db.is_finite() {
            return Err(SimError::Config("BLER curve must be non-increasing in margin".into()));
        }
        Ok(())
    }

    pub fn bler(&self, margin_db: f64) -> f64 {
        let x = self.slope_per_db * (margin_db - self.midpoint_db);
        (1.0 / (1.0 + x.exp())).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub clean_snr_db: f64,
    /// Transmit power at the clean operating point; recorded, not used by the model.
    pub tx_power_db: f64,
    /// Noise amplitude to SNR standard deviation (dB).
    pub noise_amp_to_sigma: f64,
    /// SNR loss (dB) at -40 dB jammer power, before the off-floor correction.
    pub interference_coupling: f64,
    /// Jammer power change (dB) that multiplies the SNR loss by ten.
    pub interference_decade_db: f64,
    pub mcs_table: McsTable,
    pub bler_curve: BlerCurve,
    /// EWMA weight of the newest SNR in link adaptation.
    pub link_adaptation_alpha: f64,
    /// Bitrate at the reference MCS with zero BLER.
    pub reference_bitrate_mbps: f64,
    pub reference_mcs: u8,
    pub start_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            clean_snr_db: 25.0,
            tx_power_db: -4.5,
            noise_amp_to_sigma: 10.0,
            interference_coupling: 2.0,
            interference_decade_db: 36.5,
            mcs_table: McsTable::default(),
            bler_curve: BlerCurve::default(),
            link_adaptation_alpha: 0.3,
            reference_bitrate_mbps: 20.0,
            reference_mcs: 24,
            start_ms: 0,
        }
    }
}

impl SimConfig {
    pub fn with_seed(seed: u64) -> Self {
        SimConfig { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.mcs_table.validate()?;
        self.bler_curve.validate()?;
        if !(self.noise_amp_to_sigma.is_finite() && self.noise_amp_to_sigma > 0.0) {
            return Err(SimError::Config("noise_amp_to_sigma must be positive".into()));
        }
        if !(self.interference_coupling.is_finite() && self.interference_coupling > 0.0) {
            return Err(SimError::Config("interference_coupling must be positive".into()));
        }
        if !(self.interference_decade_db.is_finite() && self.interference_decade_db > 0.0) {
            return Err(SimError::Config("interference_decade_db must be positive".into()));
        }
        if !(self.link_adaptation_alpha > 0.0 && self.link_adaptation_alpha <= 1.0) {
            return Err(SimError::Config("link_adaptation_alpha must be in (0, 1]".into()));
        }
        if self.reference_mcs == 0 || self.reference_mcs > MAX_MCS {
            return Err(SimError::Config("reference_mcs must be in 1..=28".into()));
        }
        if !(self.clean_snr_db.is_finite() && self.reference_bitrate_mbps > 0.0) {
            return Err(SimError::Config("clean SNR and reference bitrate must be positive".into()));
        }
        Ok(())
    }

    /// SNR loss caused by a jammer at `power_db`: zero at the -100 dB off
    /// floor and strictly increasing above it, clamped to the clean SNR.
    pub fn degradation_db(&self, power_db: f64) -> f64 {
        if power_db <= INTERFERENCE_OFF_DB {
            return 0.0;
        }
        let gain = |p: f64| 10f64.powf((p + 40.0) / self.interference_decade_db);
        let loss = self.interference_coupling * (gain(power_db) - gain(INTERFERENCE_OFF_DB));
        loss.clamp(0.0, self.clean_snr_db)
    }

    fn phase_mean_snr(&self, phase: &ScenarioPhase) -> f64 {
        let power = if phase.interference_event { phase.interference_db } else { INTERFERENCE_OFF_DB };
        self.clean_snr_db - self.degradation_db(power)
    }
}

/// A generated sample with the simulator's ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSample {
    pub sample: KpiSample,
    pub truth: Label,
}

/// Generates the full stream for a schedule. Identical seed, schedule and
/// config give a bit-identical stream.
pub fn generate_stream(schedule: &ScenarioSchedule, cfg: &SimConfig) -> Result<Vec<SimSample>, SimError> {
    schedule.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total: usize = schedule.phases.iter().map(|p| schedule.phase_len(p)).sum();
    let mut out = Vec::with_capacity(total);
    let mut link_snr: Option<f64> = None;
    let mut idx: u64 = 0;

    for phase in &schedule.phases {
        let mean = cfg.phase_mean_snr(phase);
        let sigma = cfg.noise_amp_to_sigma * phase.noise_amplitude;
        // Normal::new only fails on a negative or non-finite sigma, which
        // schedule validation has already excluded.
        let noise = Normal::new(0.0, sigma).expect("validated noise sigma");
        for _ in 0..schedule.phase_len(phase) {
            let snr = mean + noise.sample(&mut rng);
            let smoothed = match link_snr {
                None => snr,
                Some(prev) => cfg.link_adaptation_alpha * snr + (1.0 - cfg.link_adaptation_alpha) * prev,
            };
            link_snr = Some(smoothed);

            let mcs = cfg.mcs_table.select(smoothed);
            let bler = cfg.bler_curve.bler(snr - cfg.mcs_table.threshold(mcs));
            let bitrate = cfg.reference_bitrate_mbps * (mcs as f64 / cfg.reference_mcs as f64) * (1.0 - bler);

            out.push(SimSample {
                sample: KpiSample {
                    timestamp_ms: cfg.start_ms + idx * schedule.sample_period_ms,
                    ul_snr: snr,
                    ul_mcs: mcs,
                    ul_bitrate: bitrate,
                    ul_bler: bler,
                },
                truth: phase.truth(),
            });
            idx += 1;
        }
    }
    Ok(out)
}

/// The interference/noise scenario table: (event, jammer dB, noise amplitude)
/// for scenarios 1 through 18.
pub const SCENARIO_ROWS: [(bool, f64, f64); 18] = [
    (true, -8.0, 0.056),
    (false, -100.0, 0.056),
    (true, -8.0, 0.15),
    (false, -100.0, 0.15),
    (true, -8.0, 0.33),
    (false, -100.0, 0.33),
    (true, -20.0, 0.056),
    (false, -100.0, 0.056),
    (true, -20.0, 0.15),
    (false, -100.0, 0.15),
    (true, -20.0, 0.33),
    (false, -100.0, 0.33),
    (true, -40.0, 0.056),
    (false, -100.0, 0.056),
    (true, -40.0, 0.15),
    (false, -100.0, 0.15),
    (true, -40.0, 0.33),
    (false, -100.0, 0.33),
];

/// Default length of one scenario phase.
pub const DEFAULT_PHASE_S: f64 = 60.0;

/// Table row `row` (1-based) as a phase of the given duration.
pub fn row_phase(row: usize, duration_s: f64) -> ScenarioPhase {
    assert!((1..=18).contains(&row), "scenario rows are numbered 1..=18");
    let (on, db, amp) = SCENARIO_ROWS[row - 1];
    ScenarioPhase { duration_s, interference_event: on, interference_db: db, noise_amplitude: amp }
}

#[derive(Debug, Clone)]
pub struct ScenarioStream {
    /// 1-based scenario number.
    pub row: usize,
    pub phase: ScenarioPhase,
    pub samples: Vec<SimSample>,
}

/// One single-phase stream per table row. Row `r` uses seed `cfg.seed + r`.
pub fn run_row_suite(cfg: &SimConfig) -> Result<Vec<ScenarioStream>, SimError> {
    (1..=18)
        .map(|row| {
            let phase = row_phase(row, DEFAULT_PHASE_S);
            let sched = ScenarioSchedule::new(vec![phase]);
            let row_cfg = SimConfig { seed: cfg.seed.wrapping_add(row as u64), ..cfg.clone() };
            Ok(ScenarioStream { row, phase, samples: generate_stream(&sched, &row_cfg)? })
        })
        .collect()
}

/// Stream used to evaluate the labeler on a table row pair: the ON row and
/// the OFF row alternate twice, `ON, OFF, ON, OFF`.
pub fn row_pair_schedule(on_row: usize, phase_s: f64) -> ScenarioSchedule {
    assert!(on_row % 2 == 1, "pairs start at an odd (ON) row");
    let on = row_phase(on_row, phase_s);
    let off = row_phase(on_row + 1, phase_s);
    ScenarioSchedule::new(vec![on, off, on, off])
}

/// The twelve-scene adaptation schedule: scenes 1a-1f alternate a -12 dB
/// jammer with no jammer at noise 0.1; scenes 2a-2f repeat it at noise 0.333.
pub fn evaluation_schedule(phase_s: f64) -> ScenarioSchedule {
    let mut phases = Vec::with_capacity(12);
    for amp in [0.1, 0.333] {
        for k in 0..6 {
            phases.push(if k % 2 == 0 {
                ScenarioPhase::on(phase_s, -12.0, amp)
            } else {
                ScenarioPhase::off(phase_s, amp)
            });
        }
    }
    ScenarioSchedule::new(phases)
}

/// Scene names of the evaluation schedule, in order.
pub const EVALUATION_SCENES: [&str; 12] = ["1a", "1b", "1c", "1d", "1e", "1f", "2a", "2b", "2c", "2d", "2e", "2f"];
