//! Scenario execution: ping-pong latency, streaming throughput, and the
//! suite driver.

use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use super::config::{Assertion, SuiteConfig};
use super::report::{percentile, BenchReport, CSV_HEADER};
use super::transport::{build_transport_set, Duplex, TransportPair};
use super::{BenchError, BenchMode, Scenario};

type Endpoints = Vec<Box<dyn Duplex>>;

fn split_pairs(pairs: Vec<TransportPair>) -> (Endpoints, Endpoints) {
    let mut left = Vec::with_capacity(pairs.len());
    let mut right = Vec::with_capacity(pairs.len());
    for pair in pairs {
        left.push(pair.a);
        right.push(pair.b);
    }
    (left, right)
}

/// lat_tcp-style ping-pong: the client sends `msg_size` bytes, the server
/// echoes them back, the full round trip is timed. Reported latency is the
/// round trip; the human rendering also shows the halved value.
pub fn run_latency(scenario: &Scenario) -> Result<BenchReport, BenchError> {
    scenario.validate()?;
    let iters = match scenario.mode {
        BenchMode::Latency { iters } => iters,
        BenchMode::Throughput { .. } => {
            return Err(BenchError::InvalidScenario(
                "latency runner given a throughput scenario".into(),
            ))
        }
    };
    let set = build_transport_set(scenario)?;
    let pinned = set.pinned_bytes;
    let stats = set.stats.clone();
    let (clients, servers) = split_pairs(set.pairs);
    let msg_size = scenario.msg_size;
    let warmup = scenario.warmup_iters;
    let total = warmup + iters;

    let mut echo_threads = Vec::new();
    for mut server in servers {
        echo_threads.push(std::thread::spawn(move || -> Result<(), BenchError> {
            let mut buf = vec![0u8; msg_size];
            for _ in 0..total {
                if !server.recv_exact(&mut buf)? {
                    break;
                }
                server.send_all(&buf)?;
            }
            let _ = server.finish();
            Ok(())
        }));
    }

    let mut ping_threads = Vec::new();
    for mut client in clients {
        ping_threads.push(std::thread::spawn(move || -> Result<Vec<u64>, BenchError> {
            let msg = vec![0x5au8; msg_size];
            let mut buf = vec![0u8; msg_size];
            for _ in 0..warmup {
                client.send_all(&msg)?;
                client.recv_exact(&mut buf)?;
            }
            let mut samples = Vec::with_capacity(iters as usize);
            for _ in 0..iters {
                let t0 = Instant::now();
                client.send_all(&msg)?;
                client.recv_exact(&mut buf)?;
                samples.push(t0.elapsed().as_nanos() as u64);
            }
            let _ = client.finish();
            Ok(samples)
        }));
    }

    let mut samples = Vec::new();
    for t in ping_threads {
        samples.extend(t.join().map_err(|_| BenchError::WorkerPanic)??);
    }
    for t in echo_threads {
        t.join().map_err(|_| BenchError::WorkerPanic)??;
    }

    samples.sort_unstable();
    let mut report = BenchReport::new(scenario, pinned);
    report.p50_ns = percentile(&samples, 50);
    report.p99_ns = percentile(&samples, 99);
    report.mean_ns = if samples.is_empty() {
        0
    } else {
        samples.iter().sum::<u64>() / samples.len() as u64
    };
    let total_ns: u64 = samples.iter().sum();
    if total_ns > 0 {
        // bytes cross the wire twice per round trip
        report.bytes_per_s =
            (2 * msg_size as u128 * samples.len() as u128 * 1_000_000_000 / total_ns as u128) as u64;
    }
    for s in &stats {
        report.cpu_poll_ns += s.poll_ns.load(Ordering::Acquire);
        report.cpu_intr_ns += s.intr_ns.load(Ordering::Acquire);
    }
    Ok(report)
}

/// bw_tcp-style streaming: senders pump `msg_size` writes for the configured
/// duration, receivers drain; aggregate receive rate is reported.
pub fn run_throughput(scenario: &Scenario) -> Result<BenchReport, BenchError> {
    scenario.validate()?;
    let duration = match scenario.mode {
        BenchMode::Throughput { duration_ms } => Duration::from_millis(duration_ms),
        BenchMode::Latency { .. } => {
            return Err(BenchError::InvalidScenario(
                "throughput runner given a latency scenario".into(),
            ))
        }
    };
    let set = build_transport_set(scenario)?;
    let pinned = set.pinned_bytes;
    let stats = set.stats.clone();
    let (senders, receivers) = split_pairs(set.pairs);
    let msg_size = scenario.msg_size;

    let start = Instant::now();
    let deadline = start + duration;

    let mut recv_threads = Vec::new();
    for mut receiver in receivers {
        recv_threads.push(std::thread::spawn(move || -> Result<u64, BenchError> {
            let mut buf = vec![0u8; 1024 * 1024];
            let mut total = 0u64;
            loop {
                let n = receiver.recv(&mut buf)?;
                if n == 0 {
                    return Ok(total);
                }
                total += n as u64;
            }
        }));
    }

    let mut send_threads = Vec::new();
    for mut sender in senders {
        send_threads.push(std::thread::spawn(move || -> Result<(), BenchError> {
            let msg = vec![0xc3u8; msg_size];
            while Instant::now() < deadline {
                sender.send_all(&msg)?;
            }
            sender.finish()?;
            Ok(())
        }));
    }

    for t in send_threads {
        t.join().map_err(|_| BenchError::WorkerPanic)??;
    }
    let mut total_bytes = 0u64;
    for t in recv_threads {
        total_bytes += t.join().map_err(|_| BenchError::WorkerPanic)??;
    }
    let elapsed = start.elapsed();

    let mut report = BenchReport::new(scenario, pinned);
    report.bytes_per_s =
        (total_bytes as u128 * 1_000_000_000 / elapsed.as_nanos().max(1)) as u64;
    for s in &stats {
        report.cpu_poll_ns += s.poll_ns.load(Ordering::Acquire);
        report.cpu_intr_ns += s.intr_ns.load(Ordering::Acquire);
    }
    Ok(report)
}

pub fn run_scenario(scenario: &Scenario) -> Result<BenchReport, BenchError> {
    match scenario.mode {
        BenchMode::Latency { .. } => run_latency(scenario),
        BenchMode::Throughput { .. } => run_throughput(scenario),
    }
}

/// How the suite driver executes scenarios: in this process, or in a fresh
/// child process per scenario (the CLI passes its own binary).
pub enum SuiteExec {
    InProcess,
    Subprocess { exe: PathBuf },
}

pub struct SuiteResult {
    pub reports: Vec<BenchReport>,
    pub failures: Vec<(String, String)>,
    pub assertions: Vec<AssertionResult>,
    pub summary_path: PathBuf,
}

pub struct AssertionResult {
    pub text: String,
    pub pass: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn pass(&self) -> bool {
        self.failures.is_empty() && self.assertions.iter().all(|a| a.pass)
    }
}

fn scenario_to_args(scenario: &Scenario) -> Vec<String> {
    let mut args = vec!["bench".to_string()];
    match scenario.mode {
        BenchMode::Latency { iters } => {
            args.push("lat".into());
            args.push("--iters".into());
            args.push(iters.to_string());
        }
        BenchMode::Throughput { duration_ms } => {
            args.push("bw".into());
            args.push("--duration".into());
            args.push(duration_ms.to_string());
        }
    }
    args.push("--id".into());
    args.push(scenario.id.clone());
    args.push("--transport".into());
    match scenario.transport {
        super::TransportKind::Baseline => args.push("baseline".into()),
        super::TransportKind::Elastic => args.push("elastic".into()),
        super::TransportKind::Reserve(n) => {
            args.push("reserve".into());
            args.push("--reserve-bytes".into());
            args.push(n.to_string());
        }
    }
    args.push("--msg-size".into());
    args.push(scenario.msg_size.to_string());
    args.push("--conns".into());
    args.push(scenario.conns.to_string());
    args.push("--notify".into());
    args.push(scenario.notify_label().into());
    args.push("--warmup".into());
    args.push(scenario.warmup_iters.to_string());
    args.push("--record-bytes".into());
    args.push(scenario.policy.record_size_bytes.to_string());
    args.push("--arena-bytes".into());
    args.push(scenario.policy.arena_size_bytes.to_string());
    args.push("--local-bytes".into());
    args.push(scenario.policy.local_record_bytes.to_string());
    args.push("--max-chan".into());
    args.push(scenario.policy.max_records_per_channel.to_string());
    args.push("--max-proc".into());
    args.push(scenario.policy.max_records_per_process.to_string());
    args
}

fn run_one(scenario: &Scenario, exec: &SuiteExec, out_path: &Path) -> Result<BenchReport, BenchError> {
    match exec {
        SuiteExec::InProcess => {
            let report = run_scenario(scenario)?;
            std::fs::write(out_path, report.to_csv())?;
            Ok(report)
        }
        SuiteExec::Subprocess { exe } => {
            let mut args = scenario_to_args(scenario);
            args.push("--out".into());
            args.push(out_path.display().to_string());
            let status = std::process::Command::new(exe)
                .args(&args)
                .stdout(std::process::Stdio::null())
                .status()?;
            if !status.success() {
                return Err(BenchError::Setup(format!(
                    "scenario {} exited with {status}",
                    scenario.id
                )));
            }
            let text = std::fs::read_to_string(out_path)?;
            BenchReport::from_csv(&text)
        }
    }
}

/// Execute the scenario matrix, write one CSV per scenario plus a summary
/// CSV, and evaluate the embedded assertions. Scenario failures are recorded
/// and the suite continues.
pub fn run_suite(
    suite: &SuiteConfig,
    out_dir: &Path,
    exec: SuiteExec,
) -> Result<SuiteResult, BenchError> {
    std::fs::create_dir_all(out_dir)?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for scenario in &suite.scenarios {
        let out_path = out_dir.join(format!("{}.csv", scenario.id));
        match run_one(scenario, &exec, &out_path) {
            Ok(report) => reports.push(report),
            Err(e) => failures.push((scenario.id.clone(), e.to_string())),
        }
    }

    let summary_path = out_dir.join("summary.csv");
    let mut summary = String::from(CSV_HEADER);
    summary.push('\n');
    for r in &reports {
        summary.push_str(&r.csv_row());
        summary.push('\n');
    }
    std::fs::write(&summary_path, summary)?;

    let mut assertions = Vec::new();
    for assertion in &suite.assertions {
        assertions.push(evaluate_assertion(assertion, &reports));
    }
    Ok(SuiteResult {
        reports,
        failures,
        assertions,
        summary_path,
    })
}

fn lookup(reports: &[BenchReport], id: &str, field: &str) -> Result<u64, String> {
    let report = reports
        .iter()
        .find(|r| r.scenario_id == id)
        .ok_or_else(|| format!("no report for scenario {id:?}"))?;
    report
        .field(field)
        .ok_or_else(|| format!("unknown field {field:?}"))
}

fn evaluate_assertion(assertion: &Assertion, reports: &[BenchReport]) -> AssertionResult {
    let fail = |detail: String| AssertionResult {
        text: assertion.text.clone(),
        pass: false,
        detail,
    };
    let lhs = match lookup(reports, &assertion.lhs_id, &assertion.lhs_field) {
        Ok(v) => v as f64,
        Err(e) => return fail(e),
    };
    let rhs_base = match &assertion.rhs {
        super::config::AssertionRhs::Literal(v) => *v,
        super::config::AssertionRhs::Field { id, field } => {
            match lookup(reports, id, field) {
                Ok(v) => v as f64,
                Err(e) => return fail(e),
            }
        }
    };
    let rhs = rhs_base * assertion.rhs_scale;
    let pass = if assertion.less_equal {
        lhs <= rhs
    } else {
        lhs >= rhs
    };
    AssertionResult {
        text: assertion.text.clone(),
        pass,
        detail: format!(
            "{} = {lhs:.0} {} {rhs:.0}",
            assertion.lhs_field,
            if assertion.less_equal { "<=" } else { ">=" }
        ),
    }
}
