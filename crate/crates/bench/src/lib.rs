//! Fixtures for the benchmarks.

use sajd_core::mlp::{build_windows, FeatureWindow, WindowConfig};
use sajd_core::sim::{row_pair_schedule, DEFAULT_PHASE_S};
use sajd_core::{generate_stream, KpiSample, LabelSource, LabeledSample, SimConfig};

/// Four minutes of row 1/2 telemetry.
pub fn pair_stream() -> Vec<KpiSample> {
    generate_stream(&row_pair_schedule(1, DEFAULT_PHASE_S), &SimConfig::with_seed(1))
        .expect("built-in schedule is valid")
        .into_iter()
        .map(|s| s.sample)
        .collect()
}

/// Training windows labeled with ground truth.
pub fn truth_windows() -> Vec<FeatureWindow> {
    let labeled: Vec<LabeledSample> = generate_stream(&row_pair_schedule(1, DEFAULT_PHASE_S), &SimConfig::with_seed(1))
        .expect("built-in schedule is valid")
        .into_iter()
        .map(|s| LabeledSample {
            sample: s.sample,
            label: Some(s.truth),
            source: LabelSource::GroundTruthSim,
            batch_id: 0,
        })
        .collect();
    build_windows(&labeled, &WindowConfig::default()).expect("default window config is valid")
}
