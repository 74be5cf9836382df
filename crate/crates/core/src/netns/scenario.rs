//! Scenario files: bindings, rules, and packet cases for split-equivalence
//! verification, plus the table printer behind `netns verify`.
//!
//! ```text
//! # sidecar interception
//! pus 2
//! rule output proto=tcp dst=10.0.0.5:80 redirect=15001
//! binding default tcp 15001 receiver
//! binding default tcp 8080 sender
//! packet tcp default 127.0.0.1:5555 -> 10.0.0.5:80
//! packet tcp default 127.0.0.1:5556 -> 127.0.0.1:8080
//! ```
//!
//! Lines: `pus <n>` (optional, default 2), one or more `rule` lines (the
//! rules under test), `binding <ns> <proto> <port> <sender|receiver|pu<k>>`,
//! and `packet <proto> <ns> <src> -> <dst>`. `#` starts a comment.

use std::fmt::Write as _;

use super::rules::{Action, EndpointPattern, FilterRule, MatchSpec, Phase};
use super::sim::{
    all_placements, equivalence_check, BindingPlacement, PacketSpec, ScenarioBinding, Verdict,
};
use super::{AddrPort, NetnsError, PuId};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub pus: u32,
    pub rules: Vec<FilterRule>,
    pub bindings: Vec<ScenarioBinding>,
    pub packets: Vec<PacketSpec>,
}

fn perr(line: usize, msg: impl Into<String>) -> NetnsError {
    NetnsError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_endpoint_pattern(text: &str, line: usize) -> Result<EndpointPattern, NetnsError> {
    let (addr, port) = text
        .rsplit_once(':')
        .ok_or_else(|| perr(line, format!("expected addr:port pattern, got {text:?}")))?;
    let addr = if addr == "*" {
        None
    } else {
        Some(addr.parse().map_err(|_| perr(line, "bad address"))?)
    };
    let port = if port == "*" {
        None
    } else {
        Some(
            port.parse::<u16>()
                .map_err(|_| perr(line, format!("bad port in {text:?}")))?,
        )
    };
    Ok(EndpointPattern { addr, port })
}

fn parse_rule(rest: &str, line: usize) -> Result<FilterRule, NetnsError> {
    let mut tokens = rest.split_whitespace();
    let phase = match tokens.next() {
        Some("output") => Phase::Output,
        Some("prerouting") => Phase::Prerouting,
        Some("forward") => Phase::Forward,
        Some("input") => Phase::Input,
        other => return Err(perr(line, format!("bad phase {other:?}"))),
    };
    let mut matches = MatchSpec::default();
    let mut action: Option<Action> = None;
    for token in tokens {
        if let Some((key, value)) = token.split_once('=') {
            match key {
                "ns" => matches.ns = Some(value.to_string()),
                "proto" => {
                    matches.proto =
                        Some(value.parse().map_err(|_| perr(line, "bad protocol"))?)
                }
                "src" => matches.src = Some(parse_endpoint_pattern(value, line)?),
                "dst" => matches.dst = Some(parse_endpoint_pattern(value, line)?),
                "dnat" => {
                    action = Some(Action::Dnat(
                        value.parse().map_err(|_| perr(line, "bad dnat target"))?,
                    ))
                }
                "snat" => {
                    action = Some(Action::Snat(
                        value.parse().map_err(|_| perr(line, "bad snat source"))?,
                    ))
                }
                "redirect" => {
                    action = Some(Action::Redirect(
                        value
                            .parse::<u16>()
                            .map_err(|_| perr(line, "bad redirect port"))?,
                    ))
                }
                "forward" => {
                    let pu = value
                        .strip_prefix("pu")
                        .and_then(|n| n.parse::<u32>().ok())
                        .ok_or_else(|| perr(line, "forward target must be pu<k>"))?;
                    action = Some(Action::ForwardToPu(PuId(pu)));
                }
                other => return Err(perr(line, format!("unknown key {other:?}"))),
            }
        } else {
            match token {
                "accept" => action = Some(Action::Accept),
                "save-orig-dst" => action = Some(Action::SaveOrigDst),
                other => return Err(perr(line, format!("unknown token {other:?}"))),
            }
        }
    }
    let action = action.ok_or_else(|| perr(line, "rule has no action"))?;
    Ok(FilterRule {
        phase,
        matches,
        action,
    })
}

fn parse_placement(text: &str, line: usize) -> Result<BindingPlacement, NetnsError> {
    match text {
        "sender" => Ok(BindingPlacement::Sender),
        "receiver" => Ok(BindingPlacement::Receiver),
        other => {
            let pu = other
                .strip_prefix("pu")
                .and_then(|n| n.parse::<u32>().ok())
                .ok_or_else(|| {
                    perr(line, format!("placement must be sender|receiver|pu<k>, got {other:?}"))
                })?;
            Ok(BindingPlacement::Fixed(PuId(pu)))
        }
    }
}

pub fn parse(text: &str) -> Result<Scenario, NetnsError> {
    let mut scenario = Scenario {
        pus: 2,
        rules: Vec::new(),
        bindings: Vec::new(),
        packets: Vec::new(),
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
            "pus" => {
                let n = rest
                    .trim()
                    .parse::<u32>()
                    .map_err(|_| perr(line, "pus wants a count"))?;
                if n == 0 || n > 8 {
                    return Err(perr(line, "pus must be 1..=8"));
                }
                scenario.pus = n;
            }
            "rule" => scenario.rules.push(parse_rule(rest, line)?),
            "binding" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(perr(line, "binding wants: <ns> <proto> <port> <at>"));
                }
                scenario.bindings.push(ScenarioBinding {
                    ns: parts[0].to_string(),
                    proto: parts[1].parse().map_err(|_| perr(line, "bad protocol"))?,
                    port: parts[2]
                        .parse::<u16>()
                        .map_err(|_| perr(line, "bad port"))?,
                    at: parse_placement(parts[3], line)?,
                });
            }
            "packet" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 5 || parts[3] != "->" {
                    return Err(perr(line, "packet wants: <proto> <ns> <src> -> <dst>"));
                }
                scenario.packets.push(PacketSpec {
                    proto: parts[0].parse().map_err(|_| perr(line, "bad protocol"))?,
                    ns: parts[1].to_string(),
                    src: parts[2]
                        .parse::<AddrPort>()
                        .map_err(|_| perr(line, "bad src"))?,
                    dst: parts[4]
                        .parse::<AddrPort>()
                        .map_err(|_| perr(line, "bad dst"))?,
                });
            }
            other => return Err(perr(line, format!("unknown directive {other:?}"))),
        }
    }
    if scenario.rules.is_empty() {
        return Err(perr(0, "scenario needs at least one rule"));
    }
    if scenario.packets.is_empty() {
        return Err(perr(0, "scenario needs at least one packet"));
    }
    Ok(scenario)
}

#[derive(Debug)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
}

#[derive(Debug)]
pub struct VerifyRow {
    pub rule: String,
    pub verdict: Verdict,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.verdict.pass())
    }

    /// Pass/Fail table, one line per placement.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            writeln!(out, "rule: {}", row.rule).unwrap();
            for p in &row.verdict.placements {
                writeln!(
                    out,
                    "  {} -> {}  packets {:>3}  {}",
                    p.sender,
                    p.receiver,
                    p.packets,
                    if p.pass() {
                        "PASS".to_string()
                    } else {
                        format!("FAIL ({} mismatches)", p.mismatches.len())
                    }
                )
                .unwrap();
                for m in &p.mismatches {
                    writeln!(
                        out,
                        "    packet #{}: reference {:?} vs actual {:?}",
                        m.packet_index, m.reference, m.actual
                    )
                    .unwrap();
                }
            }
        }
        let verdict = if self.pass() { "PASS" } else { "FAIL" };
        writeln!(out, "overall: {verdict}").unwrap();
        out
    }
}

/// Run the equivalence check for every rule in the scenario over every
/// placement.
pub fn verify(scenario: &Scenario) -> Result<VerifyReport, NetnsError> {
    let placements = all_placements(scenario.pus);
    let mut rows = Vec::new();
    for rule in &scenario.rules {
        let verdict = equivalence_check(rule, &scenario.bindings, &scenario.packets, &placements)?;
        rows.push(VerifyRow {
            rule: rule.to_string(),
            verdict,
        });
    }
    Ok(VerifyReport { rows })
}
