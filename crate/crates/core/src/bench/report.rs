//! Benchmark reports and the fixed CSV surface.

use std::fmt::Write as _;

use super::{BenchError, Scenario};

pub const CSV_HEADER: &str = "scenario_id,transport,msg_size,conns,p50_ns,p99_ns,mean_ns,bytes_per_s,pinned_bytes,cpu_poll_ns,cpu_intr_ns";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub scenario_id: String,
    pub transport: String,
    pub msg_size: usize,
    pub conns: usize,
    /// Full round-trip latency percentiles (ns); zero for throughput runs.
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub mean_ns: u64,
    pub bytes_per_s: u64,
    pub pinned_bytes: u64,
    pub cpu_poll_ns: u64,
    pub cpu_intr_ns: u64,
    /// Canonical scenario line; reproduces the configuration bit-exactly.
    pub config_echo: String,
}

impl BenchReport {
    pub fn new(scenario: &Scenario, pinned_bytes: u64) -> BenchReport {
        BenchReport {
            scenario_id: scenario.id.clone(),
            transport: scenario.transport.label(),
            msg_size: scenario.msg_size,
            conns: scenario.conns,
            p50_ns: 0,
            p99_ns: 0,
            mean_ns: 0,
            bytes_per_s: 0,
            pinned_bytes,
            cpu_poll_ns: 0,
            cpu_intr_ns: 0,
            config_echo: scenario.echo(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario_id,
            self.transport,
            self.msg_size,
            self.conns,
            self.p50_ns,
            self.p99_ns,
            self.mean_ns,
            self.bytes_per_s,
            self.pinned_bytes,
            self.cpu_poll_ns,
            self.cpu_intr_ns,
        )
    }

    /// Full CSV document: header, the echo comment, one data row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        writeln!(out, "# {}", self.config_echo).unwrap();
        writeln!(out, "{}", self.csv_row()).unwrap();
        out
    }

    pub fn from_csv(text: &str) -> Result<BenchReport, BenchError> {
        let mut echo = String::new();
        let mut row = None;
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 {
                if line != CSV_HEADER {
                    return Err(BenchError::Parse {
                        line: 1,
                        msg: "unexpected CSV header".into(),
                    });
                }
                continue;
            }
            if let Some(comment) = line.strip_prefix("# ") {
                echo = comment.to_string();
                continue;
            }
            if !line.trim().is_empty() {
                row = Some((idx + 1, line.to_string()));
            }
        }
        let (line_no, row) = row.ok_or(BenchError::Parse {
            line: 0,
            msg: "CSV has no data row".into(),
        })?;
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 11 {
            return Err(BenchError::Parse {
                line: line_no,
                msg: format!("expected 11 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<u64, BenchError> {
            fields[i].parse().map_err(|_| BenchError::Parse {
                line: line_no,
                msg: format!("bad number in field {i}"),
            })
        };
        Ok(BenchReport {
            scenario_id: fields[0].to_string(),
            transport: fields[1].to_string(),
            msg_size: num(2)? as usize,
            conns: num(3)? as usize,
            p50_ns: num(4)?,
            p99_ns: num(5)?,
            mean_ns: num(6)?,
            bytes_per_s: num(7)?,
            pinned_bytes: num(8)?,
            cpu_poll_ns: num(9)?,
            cpu_intr_ns: num(10)?,
            config_echo: echo,
        })
    }

    pub fn field(&self, name: &str) -> Option<u64> {
        match name {
            "p50_ns" | "p50" => Some(self.p50_ns),
            "p99_ns" | "p99" => Some(self.p99_ns),
            "mean_ns" | "mean" => Some(self.mean_ns),
            "bytes_per_s" | "throughput" => Some(self.bytes_per_s),
            "pinned_bytes" | "pinned" => Some(self.pinned_bytes),
            "cpu_poll_ns" => Some(self.cpu_poll_ns),
            "cpu_intr_ns" => Some(self.cpu_intr_ns),
            _ => None,
        }
    }

    /// Human-readable summary; latency shown as round trip and one way.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "scenario : {}", self.scenario_id).unwrap();
        writeln!(
            out,
            "transport: {}  msg={}  conns={}",
            self.transport, self.msg_size, self.conns
        )
        .unwrap();
        if self.p50_ns > 0 {
            writeln!(
                out,
                "latency  : rtt p50={}ns p99={}ns mean={}ns (one-way p50={}ns)",
                self.p50_ns,
                self.p99_ns,
                self.mean_ns,
                self.p50_ns / 2
            )
            .unwrap();
        }
        if self.bytes_per_s > 0 {
            writeln!(out, "throughput: {} bytes/s", self.bytes_per_s).unwrap();
        }
        writeln!(out, "pinned   : {} bytes", self.pinned_bytes).unwrap();
        writeln!(
            out,
            "wait     : poll={}ns blocked={}ns",
            self.cpu_poll_ns, self.cpu_intr_ns
        )
        .unwrap();
        out
    }
}

pub(crate) fn percentile(sorted: &[u64], pct: usize) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = (sorted.len() * pct / 100).min(sorted.len() - 1);
    sorted[idx]
}
