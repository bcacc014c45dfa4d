//! Runs the closed-loop experiment or the labeler table evaluation.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use sajd_cli::{init_tracing, resolve_schedule};
use sajd_core::experiment::{pooled_agreement_excl, run_row_pair_labeler_eval, ExperimentReport};
use sajd_core::{run_experiment, run_paired, ExperimentSpec, LabelerConfig, LoopEventKind, Mode, SimConfig};

#[derive(Parser)]
#[command(version, about = "Self-adaptive jamming detection experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMode {
    Adaptive,
    Static,
    /// Both modes on the same telemetry.
    Paired,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the simulator, labeler, manager and detector on one clock.
    Run {
        /// Built-in schedule (`evaluation`, `pair-<odd row>`) or a JSON schedule file.
        #[arg(long, default_value = "evaluation")]
        schedule: String,
        #[arg(long, value_enum, default_value = "paired")]
        mode: RunMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run as fast as possible instead of at the sample rate.
        #[arg(long)]
        accel: bool,
        /// Stream time a training job takes, in ms.
        #[arg(long, default_value_t = 1000)]
        train_latency_ms: u64,
    },
    /// Labeler agreement with ground truth on every ON/OFF scenario row pair.
    Rows {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60.0)]
        phase_s: f64,
    },
}

fn print_report(r: &ExperimentReport) {
    println!("mode {}: {} swaps, {} drift retrains", r.mode, r.swap_count, r.count(LoopEventKind::DriftDetected));
    for w in &r.windows {
        let acc = w.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        println!("  {:>6} {:>6} n={}", w.window_id, acc, w.n_predictions);
    }
}

fn main() -> anyhow::Result<()> {
    init_tracing();
    match Cli::parse().cmd {
        Cmd::Run { schedule, mode, seed, out, accel, train_latency_ms } => {
            let (sched, names) = resolve_schedule(&schedule)?;
            let mut spec = ExperimentSpec::new(sched, Mode::Adaptive, seed);
            spec.window_names = names;
            spec.output_dir = Some(out.clone());
            spec.realtime = !accel;
            spec.train_latency_ms = train_latency_ms;
            match mode {
                RunMode::Paired => {
                    let (a, s) = run_paired(&spec).context("paired run")?;
                    print_report(&a);
                    print_report(&s);
                }
                RunMode::Adaptive => print_report(&run_experiment(&spec)?),
                RunMode::Static => print_report(&run_experiment(&spec.with_mode(Mode::StaticBaseline))?),
            }
            println!("outputs in {}", out.display());
        }
        Cmd::Rows { seed, phase_s } => {
            let rows = run_row_pair_labeler_eval(&SimConfig::with_seed(seed), &LabelerConfig::default(), phase_s)?;
            println!("row  int_db  noise  coverage  agreement  agreement_excl");
            let fmt = |a: Option<f64>| a.map_or("-".to_string(), |a| format!("{a:.4}"));
            for r in &rows {
                println!(
                    "{:>3}  {:>6}  {:>5}  {:>8.3}  {:>9}  {:>14}",
                    r.on_row,
                    r.interference_db,
                    r.noise_amplitude,
                    r.coverage(),
                    fmt(r.agreement()),
                    fmt(r.agreement_excl())
                );
            }
            for db in [-8.0, -20.0, -40.0] {
                println!("pooled {db} dB: {}", fmt(pooled_agreement_excl(&rows, db)));
            }
        }
    }
    Ok(())
}
