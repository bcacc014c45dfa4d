//! Helpers shared by the binaries.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context};
use sajd_core::experiment::named_schedule;
use sajd_core::ScenarioSchedule;

/// Logs to stderr, filtered by `RUST_LOG` (default `info`).
pub fn init_tracing() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
}

/// Resolves a built-in schedule name or reads a schedule file. Returns the
/// schedule and one window name per phase.
pub fn resolve_schedule(arg: &str) -> anyhow::Result<(ScenarioSchedule, Vec<String>)> {
    if let Some(found) = named_schedule(arg) {
        return Ok(found);
    }
    if !Path::new(arg).exists() {
        bail!("{arg:?} is neither a built-in schedule (evaluation, pair-<odd row>) nor a file");
    }
    let text = std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
    let sched = ScenarioSchedule::from_json_str(&text).with_context(|| format!("parsing {arg}"))?;
    let names = (1..=sched.phases.len()).map(|i| format!("p{i}")).collect();
    Ok((sched, names))
}

/// Flag set by Ctrl-C / SIGTERM.
pub fn stop_flag() -> anyhow::Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    Ok(stop)
}
