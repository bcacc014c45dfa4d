//! Detection service: NDJSON telemetry in over TCP, predictions out to the
//! store, model updates over HTTP.

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::Duration;

use clap::Parser;
use sajd_cli::{init_tracing, stop_flag};
use sajd_core::service::{serve, ServeConfig};

#[derive(Parser)]
#[command(version, about = "Jamming detection xApp")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7100")]
    stream_listen: String,
    #[arg(long, default_value = "127.0.0.1:7101")]
    control_listen: String,
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Log raw samples and predictions here.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    sample_period_ms: u64,
}

fn main() -> anyhow::Result<()> {
    init_tracing();
    let args = Args::parse();
    let stop = stop_flag()?;
    let handle = serve(ServeConfig {
        stream_listen_addr: args.stream_listen,
        control_listen_addr: args.control_listen,
        registry_dir: args.registry,
        store_dir: args.store,
        sample_period_ms: args.sample_period_ms,
        load_latest: true,
    })?;
    tracing::info!(stream = %handle.stream_addr, control = %handle.control_addr, model = ?handle.service.model_version(), "serving");
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    let stats = handle.shutdown()?;
    tracing::info!(?stats, "stopped");
    Ok(())
}
