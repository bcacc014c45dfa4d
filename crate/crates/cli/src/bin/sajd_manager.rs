//! Training manager: follows the xApp's store, auto-labels, trains,
//! registers and pushes models.

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::Duration;

use clap::Parser;
use sajd_cli::{init_tracing, stop_flag};
use sajd_core::manager::{DriftMonitorConfig, HttpNotifier, JobExecution, ManagerLoop, TrainingManager};
use sajd_core::mlp::TrainConfig;
use sajd_core::registry::ModelRegistry;
use sajd_core::store::{Store, StoreError, EVENTS, LABELED, PREDICTIONS, RAW};
use sajd_core::{KpiSample, LabelerConfig, Prediction};

#[derive(Parser)]
#[command(version, about = "Drift-driven training manager")]
struct Args {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    /// Control address of the detection xApp.
    #[arg(long)]
    xapp: String,
    #[arg(long, default_value_t = 0.70)]
    drift_threshold: f64,
    #[arg(long, default_value_t = 100)]
    eval_window: usize,
    /// Periodic retrain interval in seconds.
    #[arg(long, default_value_t = 600.0)]
    periodic: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    poll_ms: u64,
}

fn since<T: serde::de::DeserializeOwned>(store: &Store, name: &str, t0: u64) -> Result<Vec<T>, StoreError> {
    match store.query_range(name, t0, u64::MAX) {
        Err(StoreError::UnknownSeries(_)) => Ok(Vec::new()),
        r => r,
    }
}

fn main() -> anyhow::Result<()> {
    init_tracing();
    let args = Args::parse();
    let cfg = DriftMonitorConfig {
        drift_threshold: args.drift_threshold,
        eval_window: args.eval_window,
        periodic_interval_s: args.periodic,
        ..DriftMonitorConfig::default()
    };
    let train = TrainConfig { seed: args.seed, ..TrainConfig::default() };
    let manager = TrainingManager::new(cfg, train, ModelRegistry::open(&args.registry)?)?;
    let mut lp = ManagerLoop::new(manager, LabelerConfig::default(), JobExecution::Thread);
    let mut notifier = HttpNotifier::new(&args.xapp);
    let mut store = Store::open(&args.store)?;
    let stop = stop_flag()?;
    let (mut raw_cursor, mut pred_cursor, mut now) = (0u64, 0u64, 0u64);

    while !stop.load(Ordering::SeqCst) {
        store.refresh()?;
        for p in since::<Prediction>(&store, PREDICTIONS, pred_cursor)? {
            lp.on_prediction(&p);
            pred_cursor = p.ts + 1;
        }
        for s in since::<KpiSample>(&store, RAW, raw_cursor)? {
            raw_cursor = s.timestamp_ms + 1;
            now = s.timestamp_ms;
            let labels = lp.on_raw(s);
            store.append_all(LABELED, &labels)?;
        }
        if let Err(e) = lp.tick(now, &mut notifier) {
            tracing::warn!(error = %e, "manager step failed");
        }
        store.append_all(EVENTS, &lp.drain_events())?;
        std::thread::sleep(Duration::from_millis(args.poll_ms));
    }
    store.flush()?;
    Ok(())
}
