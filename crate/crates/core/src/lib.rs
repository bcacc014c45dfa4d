//! Self-adaptive interference detection for an uplink RAN link: KPI
//! simulator, unsupervised auto-labeler, MLP detector, drift-triggered
//! retraining and the detection service.

// Config checks use `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod gmm;
pub mod labeler;
pub mod manager;
pub mod mlp;
pub mod prep;
pub mod registry;
pub mod service;
pub mod sim;
pub mod store;
pub mod telemetry;

pub use experiment::{
    run_experiment, run_paired, ExperimentError, ExperimentReport, ExperimentSpec, Mode, WindowAccuracy,
};
pub use gmm::{em_fit, gmm_predict, EmConfig, EmFit, Gmm1d, GmmError};
pub use labeler::{run_labeler, BatchDecision, LabelerConfig, LabelerState, LabelingModel, StreamLabeler};
pub use prep::{arc, moving_average, standard_scale, Batch, PrepError, Scaler, SmoothingConfig};
pub use sim::{generate_stream, SimConfig, SimError, SimSample};
pub use telemetry::*;
