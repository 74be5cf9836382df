//! Packet-filter rule IR: a minimal idealized subset of iptables-style
//! semantics, small enough that split equivalence is machine-checkable.
//!
//! Four phases, first **terminal** match wins per phase. `SaveOrigDst` and
//! `Snat` are non-terminal (they annotate the packet and matching continues,
//! mirroring conntrack recording and post-routing source rewrite);
//! `Dnat`/`Redirect`/`Accept`/`ForwardToPu` terminate their phase.
//! `Redirect` carries the interception semantics of its iptables namesake:
//! destination rewrite to a local port *plus* original-destination recording
//! on the PU where it runs.

use std::fmt;

use super::{Addr, AddrPort, Proto, PuId};
use crate::netns::sim::PacketState;

/// Pipeline phase a rule is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Output,
    Prerouting,
    Forward,
    Input,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Output => write!(f, "output"),
            Phase::Prerouting => write!(f, "prerouting"),
            Phase::Forward => write!(f, "forward"),
            Phase::Input => write!(f, "input"),
        }
    }
}

/// Endpoint pattern: `None` fields are wildcards.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointPattern {
    pub addr: Option<Addr>,
    pub port: Option<u16>,
}

impl EndpointPattern {
    pub fn exact(ap: &AddrPort) -> EndpointPattern {
        EndpointPattern {
            addr: Some(ap.addr.clone()),
            port: Some(ap.port),
        }
    }

    pub fn addr(addr: Addr) -> EndpointPattern {
        EndpointPattern {
            addr: Some(addr),
            port: None,
        }
    }

    fn matches(&self, ap: &AddrPort) -> bool {
        self.addr.as_ref().is_none_or(|a| *a == ap.addr)
            && self.port.is_none_or(|p| p == ap.port)
    }
}

impl fmt::Display for EndpointPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.addr {
            Some(a) => write!(f, "{a}")?,
            None => write!(f, "*")?,
        }
        match self.port {
            Some(p) => write!(f, ":{p}"),
            None => write!(f, ":*"),
        }
    }
}

/// Total predicate over packet state: every field is optional, absent fields
/// match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSpec {
    pub ns: Option<String>,
    pub proto: Option<Proto>,
    pub src: Option<EndpointPattern>,
    pub dst: Option<EndpointPattern>,
}

impl MatchSpec {
    pub fn dst(ap: &AddrPort) -> MatchSpec {
        MatchSpec {
            dst: Some(EndpointPattern::exact(ap)),
            ..MatchSpec::default()
        }
    }

    pub fn matches(&self, pkt: &PacketState) -> bool {
        self.ns.as_ref().is_none_or(|ns| *ns == pkt.ns)
            && self.proto.is_none_or(|p| p == pkt.proto)
            && self.src.as_ref().is_none_or(|p| p.matches(&pkt.src))
            && self.dst.as_ref().is_none_or(|p| p.matches(&pkt.dst))
    }
}

impl fmt::Display for MatchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(ns) = &self.ns {
            parts.push(format!("ns={ns}"));
        }
        if let Some(p) = self.proto {
            parts.push(format!("proto={p}"));
        }
        if let Some(s) = &self.src {
            parts.push(format!("src={s}"));
        }
        if let Some(d) = &self.dst {
            parts.push(format!("dst={d}"));
        }
        if parts.is_empty() {
            write!(f, "any")
        } else {
            write!(f, "{}", parts.join(" "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Rewrite the destination; no original-destination recording.
    Dnat(AddrPort),
    /// Rewrite the source address (port kept); non-terminal.
    Snat(Addr),
    /// Interception: record the original destination on this PU, then
    /// rewrite the destination to the local `port`.
    Redirect(u16),
    /// Record the current destination on this PU; non-terminal.
    SaveOrigDst,
    /// Send the packet over the inter-PU link, unmodified.
    ForwardToPu(PuId),
    /// Stop the phase without touching the packet.
    Accept,
}

impl Action {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Action::SaveOrigDst | Action::Snat(_))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Action::Dnat(_) => "dnat",
            Action::Snat(_) => "snat",
            Action::Redirect(_) => "redirect",
            Action::SaveOrigDst => "save-orig-dst",
            Action::ForwardToPu(_) => "forward",
            Action::Accept => "accept",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Dnat(ap) => write!(f, "dnat={ap}"),
            Action::Snat(a) => write!(f, "snat={a}"),
            Action::Redirect(p) => write!(f, "redirect={p}"),
            Action::SaveOrigDst => write!(f, "save-orig-dst"),
            Action::ForwardToPu(pu) => write!(f, "forward={pu}"),
            Action::Accept => write!(f, "accept"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterRule {
    pub phase: Phase,
    pub matches: MatchSpec,
    pub action: Action,
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.phase, self.matches, self.action)
    }
}

/// Ordered per-PU rule program; pure data, applying it is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleProgram {
    pub pu: PuId,
    pub rules: Vec<FilterRule>,
}

impl RuleProgram {
    pub fn new(pu: PuId) -> RuleProgram {
        RuleProgram {
            pu,
            rules: Vec::new(),
        }
    }

    pub fn push(&mut self, rule: FilterRule) {
        self.rules.push(rule);
    }

    pub fn rules_for(&self, phase: Phase) -> impl Iterator<Item = &FilterRule> {
        self.rules.iter().filter(move |r| r.phase == phase)
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn merge(&mut self, other: RuleProgram) {
        debug_assert_eq!(self.pu, other.pu);
        self.rules.extend(other.rules);
    }
}
