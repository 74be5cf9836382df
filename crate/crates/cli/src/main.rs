//! `elastisock` — benchmark runner and split-namespace rule verifier.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use elastisock::bench::{
    self, run_latency, run_suite, run_throughput, BenchMode, Scenario, SuiteExec, TransportKind,
};
use elastisock::channel::NotifyPreference;
use elastisock::config::parse_size;
use elastisock::netns::scenario as netns_scenario;

#[derive(Parser)]
#[command(name = "elastisock", version, about = "Elastic shared-memory socket toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Latency / throughput benchmarks over the three transports.
    Bench {
        #[command(subcommand)]
        what: BenchCommand,
    },
    /// Split-network-namespace tooling.
    Netns {
        #[command(subcommand)]
        what: NetnsCommand,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Ping-pong round-trip latency (lat_tcp style).
    Lat(BenchArgs),
    /// Streaming throughput (bw_tcp style).
    Bw(BenchArgs),
    /// Run a scenario matrix from a config file, one fresh process per
    /// scenario, and enforce its assertions.
    Suite {
        /// Suite config file.
        config: PathBuf,
        /// Output directory for per-scenario CSVs and summary.csv.
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Run scenarios inside this process instead of spawning children.
        #[arg(long)]
        in_process: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Baseline,
    Reserve,
    Elastic,
}

#[derive(Clone, Copy, ValueEnum)]
enum NotifyArg {
    Blocking,
    Nonblocking,
    Adaptive,
}

#[derive(Args)]
struct BenchArgs {
    /// Scenario id used in reports.
    #[arg(long, default_value = "cli")]
    id: String,
    #[arg(long, value_enum, default_value_t = TransportArg::Elastic)]
    transport: TransportArg,
    /// Message size in bytes (sizes accept K/M/G suffixes).
    #[arg(long, default_value = "16")]
    msg_size: String,
    /// Concurrent connections, one worker pair each.
    #[arg(long, default_value_t = 1)]
    conns: usize,
    /// Per-direction buffer reservation for the reserve transport.
    #[arg(long, default_value = "16M")]
    reserve_bytes: String,
    /// Measured iterations (latency mode).
    #[arg(long, default_value_t = 10_000)]
    iters: u64,
    /// Measured duration in milliseconds (throughput mode).
    #[arg(long, default_value_t = 2_000)]
    duration: u64,
    /// Warmup iterations, discarded.
    #[arg(long, default_value_t = 1_000)]
    warmup: u64,
    #[arg(long, value_enum, default_value_t = NotifyArg::Adaptive)]
    notify: NotifyArg,
    /// Elastic record size in bytes.
    #[arg(long, default_value = "64K")]
    record_bytes: String,
    /// Elastic shared-arena total bytes.
    #[arg(long, default_value = "128M")]
    arena_bytes: String,
    /// Elastic per-direction local record bytes.
    #[arg(long, default_value = "64K")]
    local_bytes: String,
    /// Records one channel may hold claimed or committed.
    #[arg(long, default_value_t = 64)]
    max_chan: u32,
    /// Records one worker (process stand-in) may hold.
    #[arg(long, default_value_t = 4096)]
    max_proc: u32,
    /// Write the report CSV here (stdout gets the human summary).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum NetnsCommand {
    /// Check a scenario file's rule splits against single-PU semantics and
    /// print a pass/fail table per placement.
    Verify { scenario: PathBuf },
}

fn size_arg(text: &str, what: &str) -> Result<u64, String> {
    parse_size(text).ok_or_else(|| format!("bad size for {what}: {text:?}"))
}

fn build_scenario(args: &BenchArgs, mode: BenchMode) -> Result<Scenario, String> {
    let transport = match args.transport {
        TransportArg::Baseline => TransportKind::Baseline,
        TransportArg::Elastic => TransportKind::Elastic,
        TransportArg::Reserve => {
            TransportKind::Reserve(size_arg(&args.reserve_bytes, "--reserve-bytes")?)
        }
    };
    let mut scenario = Scenario {
        id: args.id.clone(),
        mode,
        transport,
        msg_size: size_arg(&args.msg_size, "--msg-size")? as usize,
        conns: args.conns,
        notify: match args.notify {
            NotifyArg::Blocking => NotifyPreference::Blocking,
            NotifyArg::Nonblocking => NotifyPreference::NonBlocking,
            NotifyArg::Adaptive => NotifyPreference::Adaptive,
        },
        warmup_iters: args.warmup,
        policy: Default::default(),
    };
    scenario.policy.record_size_bytes = size_arg(&args.record_bytes, "--record-bytes")? as u32;
    scenario.policy.arena_size_bytes = size_arg(&args.arena_bytes, "--arena-bytes")?;
    scenario.policy.local_record_bytes = size_arg(&args.local_bytes, "--local-bytes")? as u32;
    scenario.policy.max_records_per_channel = args.max_chan;
    scenario.policy.max_records_per_process = args.max_proc;
    scenario.validate().map_err(|e| e.to_string())?;
    Ok(scenario)
}

fn run_bench(args: &BenchArgs, latency: bool) -> Result<(), String> {
    let mode = if latency {
        BenchMode::Latency { iters: args.iters }
    } else {
        BenchMode::Throughput {
            duration_ms: args.duration,
        }
    };
    let scenario = build_scenario(args, mode)?;
    let report = if latency {
        run_latency(&scenario)
    } else {
        run_throughput(&scenario)
    }
    .map_err(|e| e.to_string())?;
    print!("{}", report.render());
    if let Some(path) = &args.out {
        std::fs::write(path, report.to_csv()).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run_suite_cmd(config: &Path, out: &Path, in_process: bool) -> Result<bool, String> {
    let text = std::fs::read_to_string(config).map_err(|e| format!("{}: {e}", config.display()))?;
    let suite = bench::parse_suite(&text).map_err(|e| e.to_string())?;
    let exec = if in_process {
        SuiteExec::InProcess
    } else {
        SuiteExec::Subprocess {
            exe: std::env::current_exe().map_err(|e| e.to_string())?,
        }
    };
    let result = run_suite(&suite, out, exec).map_err(|e| e.to_string())?;
    for report in &result.reports {
        println!(
            "{:24} {:>14} bytes/s  p50 {:>10} ns  pinned {:>12}",
            report.scenario_id, report.bytes_per_s, report.p50_ns, report.pinned_bytes
        );
    }
    for (id, err) in &result.failures {
        println!("{id:24} FAILED: {err}");
    }
    for a in &result.assertions {
        println!(
            "{} {} ({})",
            if a.pass { "PASS" } else { "FAIL" },
            a.text,
            a.detail
        );
    }
    println!("summary: {}", result.summary_path.display());
    Ok(result.pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Bench { what } => match what {
            BenchCommand::Lat(args) => run_bench(args, true).map(|()| true),
            BenchCommand::Bw(args) => run_bench(args, false).map(|()| true),
            BenchCommand::Suite {
                config,
                out,
                in_process,
            } => run_suite_cmd(config, out, *in_process),
        },
        Command::Netns { what } => match what {
            NetnsCommand::Verify { scenario } => (|| {
                let text = std::fs::read_to_string(scenario)
                    .map_err(|e| format!("{}: {e}", scenario.display()))?;
                let parsed = netns_scenario::parse(&text).map_err(|e| e.to_string())?;
                let report = netns_scenario::verify(&parsed).map_err(|e| e.to_string())?;
                print!("{}", report.render());
                Ok(report.pass())
            })(),
        },
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
