//! Suite config files: the scenario matrix plus acceptance assertions.
//!
//! ```text
//! # scenarios
//! scenario lat-elastic lat iters=20000 transport=elastic msg=16 conns=1
//! scenario bw-reserve16 bw duration_ms=3000 transport=reserve reserve=16MiB msg=64KiB conns=100
//! scenario bw-elastic bw duration_ms=3000 transport=elastic msg=64KiB conns=100 arena=128MiB local=64KiB
//!
//! # assertions over report fields
//! assert bw-elastic.pinned_bytes <= bw-reserve16.pinned_bytes / 16
//! assert bw-elastic.bytes_per_s >= bw-reserve16.bytes_per_s * 0.9
//! ```

use crate::channel::NotifyPreference;
use crate::config::parse_size;

use super::{BenchError, BenchMode, Scenario, TransportKind};

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub scenarios: Vec<Scenario>,
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone)]
pub enum AssertionRhs {
    Literal(f64),
    Field { id: String, field: String },
}

#[derive(Debug, Clone)]
pub struct Assertion {
    pub text: String,
    pub lhs_id: String,
    pub lhs_field: String,
    pub less_equal: bool,
    pub rhs: AssertionRhs,
    /// Multiplier folded from a trailing `* k` or `/ k`.
    pub rhs_scale: f64,
}

fn perr(line: usize, msg: impl Into<String>) -> BenchError {
    BenchError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_scenario(rest: &str, line: usize) -> Result<Scenario, BenchError> {
    let mut tokens = rest.split_whitespace();
    let id = tokens
        .next()
        .ok_or_else(|| perr(line, "scenario wants an id"))?
        .to_string();
    let kind = tokens
        .next()
        .ok_or_else(|| perr(line, "scenario wants lat|bw"))?;
    let mut scenario = match kind {
        "lat" => Scenario::latency(&id, TransportKind::Baseline, 16, 10_000),
        "bw" => Scenario::throughput(&id, TransportKind::Baseline, 64 * 1024, 1, 2000),
        other => return Err(perr(line, format!("scenario kind must be lat|bw, got {other:?}"))),
    };
    let mut reserve: Option<u64> = None;
    let mut transport: Option<&str> = None;
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| perr(line, format!("expected key=value, got {token:?}")))?;
        let size = || {
            parse_size(value).ok_or_else(|| perr(line, format!("bad size for {key}: {value:?}")))
        };
        match key {
            "transport" => transport = Some(value),
            "reserve" => reserve = Some(size()?),
            "msg" | "msg_size" => scenario.msg_size = size()? as usize,
            "conns" => scenario.conns = size()? as usize,
            "iters" => match &mut scenario.mode {
                BenchMode::Latency { iters } => *iters = size()?,
                _ => return Err(perr(line, "iters only applies to lat scenarios")),
            },
            "duration_ms" => match &mut scenario.mode {
                BenchMode::Throughput { duration_ms } => *duration_ms = size()?,
                _ => return Err(perr(line, "duration_ms only applies to bw scenarios")),
            },
            "warmup" => scenario.warmup_iters = size()?,
            "notify" => {
                scenario.notify = match value {
                    "blocking" => NotifyPreference::Blocking,
                    "nonblocking" => NotifyPreference::NonBlocking,
                    "adaptive" => NotifyPreference::Adaptive,
                    other => return Err(perr(line, format!("bad notify mode {other:?}"))),
                }
            }
            "record" => scenario.policy.record_size_bytes = size()? as u32,
            "arena" => scenario.policy.arena_size_bytes = size()?,
            "local" => scenario.policy.local_record_bytes = size()? as u32,
            "max_chan" => scenario.policy.max_records_per_channel = size()? as u32,
            "max_proc" => scenario.policy.max_records_per_process = size()? as u32,
            other => return Err(perr(line, format!("unknown scenario key {other:?}"))),
        }
    }
    scenario.transport = match transport {
        Some("baseline") | None => TransportKind::Baseline,
        Some("elastic") => TransportKind::Elastic,
        Some("reserve") => TransportKind::Reserve(
            reserve.ok_or_else(|| perr(line, "reserve transport wants reserve=<size>"))?,
        ),
        Some(other) => return Err(perr(line, format!("unknown transport {other:?}"))),
    };
    scenario
        .validate()
        .map_err(|e| perr(line, e.to_string()))?;
    Ok(scenario)
}

fn parse_ref(token: &str, line: usize) -> Result<(String, String), BenchError> {
    let (id, field) = token
        .split_once('.')
        .ok_or_else(|| perr(line, format!("expected <scenario>.<field>, got {token:?}")))?;
    Ok((id.to_string(), field.to_string()))
}

fn parse_assertion(rest: &str, line: usize, text: &str) -> Result<Assertion, BenchError> {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    if tokens.len() != 3 && tokens.len() != 5 {
        return Err(perr(
            line,
            "assert wants: <id.field> <=|>= <id.field|number> [*|/ <factor>]",
        ));
    }
    let (lhs_id, lhs_field) = parse_ref(tokens[0], line)?;
    let less_equal = match tokens[1] {
        "<=" => true,
        ">=" => false,
        other => return Err(perr(line, format!("operator must be <= or >=, got {other:?}"))),
    };
    let rhs = if tokens[2].contains('.') && tokens[2].parse::<f64>().is_err() {
        let (id, field) = parse_ref(tokens[2], line)?;
        AssertionRhs::Field { id, field }
    } else {
        AssertionRhs::Literal(
            tokens[2]
                .parse::<f64>()
                .map_err(|_| perr(line, format!("bad number {:?}", tokens[2])))?,
        )
    };
    let rhs_scale = if tokens.len() == 5 {
        let factor: f64 = tokens[4]
            .parse()
            .map_err(|_| perr(line, format!("bad factor {:?}", tokens[4])))?;
        match tokens[3] {
            "*" => factor,
            "/" => {
                if factor == 0.0 {
                    return Err(perr(line, "division by zero"));
                }
                1.0 / factor
            }
            other => return Err(perr(line, format!("expected * or /, got {other:?}"))),
        }
    } else {
        1.0
    };
    Ok(Assertion {
        text: text.to_string(),
        lhs_id,
        lhs_field,
        less_equal,
        rhs,
        rhs_scale,
    })
}

pub fn parse_suite(text: &str) -> Result<SuiteConfig, BenchError> {
    let mut suite = SuiteConfig {
        scenarios: Vec::new(),
        assertions: Vec::new(),
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = match raw.split_once('#') {
            Some((before, _)) => before.trim(),
            None => raw.trim(),
        };
        if trimmed.is_empty() {
            continue;
        }
        let (verb, rest) = trimmed
            .split_once(char::is_whitespace)
            .ok_or_else(|| perr(line, format!("incomplete line {trimmed:?}")))?;
        match verb {
            "scenario" => {
                let scenario = parse_scenario(rest, line)?;
                if suite.scenarios.iter().any(|s| s.id == scenario.id) {
                    return Err(perr(line, format!("duplicate scenario id {:?}", scenario.id)));
                }
                suite.scenarios.push(scenario);
            }
            "assert" => suite.assertions.push(parse_assertion(rest, line, trimmed)?),
            other => return Err(perr(line, format!("unknown directive {other:?}"))),
        }
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_matrix_and_assertions() {
        let suite = parse_suite(
            "# demo\n\
             scenario lat-base lat iters=100 transport=baseline msg=16\n\
             scenario bw-r16 bw duration_ms=50 transport=reserve reserve=16MiB msg=64KiB conns=2\n\
             scenario bw-el bw duration_ms=50 transport=elastic msg=64KiB conns=2 arena=8MiB\n\
             assert bw-el.pinned_bytes <= bw-r16.pinned_bytes / 16\n\
             assert bw-el.bytes_per_s >= bw-r16.bytes_per_s * 0.9\n\
             assert lat-base.p50_ns <= 100000000\n",
        )
        .unwrap();
        assert_eq!(suite.scenarios.len(), 3);
        assert_eq!(suite.assertions.len(), 3);
        assert_eq!(
            suite.scenarios[1].transport,
            TransportKind::Reserve(16 * 1024 * 1024)
        );
        assert!(suite.assertions[0].less_equal);
        assert!((suite.assertions[0].rhs_scale - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn echo_reparses_to_the_same_scenario() {
        let suite = parse_suite(
            "scenario bw-el bw duration_ms=50 transport=elastic msg=64KiB conns=2 arena=8MiB notify=blocking\n",
        )
        .unwrap();
        let scenario = &suite.scenarios[0];
        let echo = scenario.echo();
        let reparsed = parse_suite(&format!("{echo}\n")).unwrap();
        assert_eq!(&reparsed.scenarios[0], scenario);
    }

    #[test]
    fn bad_lines_are_rejected() {
        assert!(parse_suite("scenario x lat iters=banana\n").is_err());
        assert!(parse_suite("scenario x bw iters=5\n").is_err());
        assert!(parse_suite("assert a.b == c.d\n").is_err());
        assert!(parse_suite("assert a.p50_ns <= b.p50_ns % 2\n").is_err());
        assert!(parse_suite("scenario x lat transport=reserve\n").is_err());
        assert!(
            parse_suite("scenario x lat iters=1\nscenario x lat iters=1\n").is_err(),
            "duplicate ids rejected"
        );
        assert!(parse_suite("scenario x lat msg=0\n").is_err());
    }

    #[test]
    fn empty_matrix_is_valid() {
        let suite = parse_suite("# nothing\n").unwrap();
        assert!(suite.scenarios.is_empty());
        assert!(suite.assertions.is_empty());
    }
}
