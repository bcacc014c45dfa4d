//! Synthetic uplink KPI generator. Writes wire samples to a file or a TCP
//! peer, plus a ground-truth sidecar.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::Parser;
use sajd_cli::{init_tracing, resolve_schedule, stop_flag};
use sajd_core::{encode_sample, generate_stream, SimConfig, TruthRecord};

#[derive(Parser)]
#[command(version, about = "Synthetic uplink KPI stream")]
struct Args {
    /// Built-in schedule name or JSON schedule file.
    #[arg(long, default_value = "evaluation")]
    schedule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file, or `tcp://host:port` to stream to a detection service.
    #[arg(long)]
    out: String,
    /// Ground-truth sidecar; defaults to `<out>.truth.ndjson`, or
    /// `truth.ndjson` for TCP output.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Send TCP output as fast as possible instead of at the sample rate.
    #[arg(long)]
    accel: bool,
}

fn main() -> anyhow::Result<()> {
    init_tracing();
    let args = Args::parse();
    let (sched, _) = resolve_schedule(&args.schedule)?;
    let stream = generate_stream(&sched, &SimConfig::with_seed(args.seed))?;

    let tcp = args.out.strip_prefix("tcp://");
    let truth_path = args.truth.clone().unwrap_or_else(|| match tcp {
        Some(_) => PathBuf::from("truth.ndjson"),
        None => PathBuf::from(format!("{}.truth.ndjson", args.out)),
    });
    let mut truth =
        BufWriter::new(File::create(&truth_path).with_context(|| format!("creating {}", truth_path.display()))?);

    let (mut out, pace): (Box<dyn Write>, bool) = match tcp {
        Some(addr) => {
            let sock = TcpStream::connect(addr).with_context(|| format!("connecting to {addr}"))?;
            sock.set_nodelay(true)?;
            (Box::new(sock), !args.accel)
        }
        None => (
            Box::new(BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out))?)),
            false,
        ),
    };

    let stop = stop_flag()?;
    let period = Duration::from_millis(sched.sample_period_ms);
    let start = Instant::now();
    let mut sent = 0usize;
    for (i, s) in stream.iter().enumerate() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        if pace {
            if let Some(wait) = (period * i as u32).checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        out.write_all(&encode_sample(&s.sample))?;
        serde_json::to_writer(&mut truth, &TruthRecord { ts: s.sample.timestamp_ms, label: s.truth })?;
        truth.write_all(b"\n")?;
        sent += 1;
    }
    out.flush()?;
    truth.flush()?;
    tracing::info!(sent, truth = %truth_path.display(), "done");
    Ok(())
}
