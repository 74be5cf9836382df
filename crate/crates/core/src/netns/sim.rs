//! Deterministic multi-PU packet-pipeline simulator.
//!
//! A packet starts at its origin PU (Output phase), hops across the inter-PU
//! link when a rule forwards it or its destination is another PU's internal
//! address, and runs Prerouting / Input or Forward at each visited PU.
//! Original-destination recording is per-PU, like conntrack state per kernel:
//! the observation reports only what the *receiver's* PU recorded, which is
//! exactly what a `getsockopt`-style metadata query could see there.

use std::collections::BTreeMap;

use super::rules::{Action, Phase, RuleProgram};
use super::table::PortTable;
use super::{AddrPort, Addr, Proto, PuId};

const MAX_HOPS: u32 = 8;

/// Mutable packet state threaded through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketState {
    pub ns: String,
    pub proto: Proto,
    pub src: AddrPort,
    pub dst: AddrPort,
    pub location: PuId,
    /// Per-PU original-destination record (conntrack analog); first save on a
    /// PU wins.
    pub orig_dst: BTreeMap<PuId, AddrPort>,
    pub delivered_to: Option<(PuId, u16)>,
}

impl PacketState {
    pub fn new(ns: &str, proto: Proto, src: AddrPort, dst: AddrPort, origin: PuId) -> PacketState {
        PacketState {
            ns: ns.to_string(),
            proto,
            src,
            dst,
            location: origin,
            orig_dst: BTreeMap::new(),
            delivered_to: None,
        }
    }

    fn save_orig(&mut self, at: PuId) {
        let dst = self.dst.clone();
        self.orig_dst.entry(at).or_insert(dst);
    }
}

/// What the terminal observer (the receiving socket, or the wire) sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryObservation {
    pub receiver_pu: PuId,
    pub receiver_port: u16,
    pub final_dst: AddrPort,
    pub final_src: AddrPort,
    /// What an original-destination metadata query at the receiver reports:
    /// the record saved on the receiver's own PU, if any.
    pub observable_orig_dst: Option<AddrPort>,
    /// Generated/installed rules the packet actually hit.
    pub rule_hits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimOutcome {
    Delivered(DeliveryObservation),
    /// External destination, never delivered inside the namespace.
    Egress {
        final_src: AddrPort,
        final_dst: AddrPort,
    },
    /// Local-looking destination with no matching binding or input rule.
    NoReceiver,
    /// Hop bound exceeded.
    RoutingLoop,
}

impl SimOutcome {
    pub fn delivered(&self) -> Option<&DeliveryObservation> {
        match self {
            SimOutcome::Delivered(obs) => Some(obs),
            _ => None,
        }
    }
}

/// Programs plus bindings: everything the pipeline consults.
#[derive(Debug, Clone, Default)]
pub struct Network {
    pub programs: BTreeMap<PuId, RuleProgram>,
    pub table: PortTable,
}

impl Network {
    pub fn program(&mut self, program: RuleProgram) {
        self.programs
            .entry(program.pu)
            .or_insert_with(|| RuleProgram::new(program.pu))
            .merge(program);
    }
}

enum PhaseVerdict {
    Continue,
    Jump(PuId),
}

fn apply_phase(net: &Network, pkt: &mut PacketState, phase: Phase, hits: &mut u32) -> PhaseVerdict {
    let Some(program) = net.programs.get(&pkt.location) else {
        return PhaseVerdict::Continue;
    };
    for rule in program.rules_for(phase) {
        if !rule.matches.matches(pkt) {
            continue;
        }
        *hits += 1;
        match &rule.action {
            Action::SaveOrigDst => {
                pkt.save_orig(pkt.location);
                continue;
            }
            Action::Snat(addr) => {
                pkt.src.addr = addr.clone();
                continue;
            }
            Action::Dnat(ap) => {
                pkt.dst = ap.clone();
                return PhaseVerdict::Continue;
            }
            Action::Redirect(port) => {
                pkt.save_orig(pkt.location);
                pkt.dst = AddrPort::local(*port);
                return PhaseVerdict::Continue;
            }
            Action::Accept => return PhaseVerdict::Continue,
            Action::ForwardToPu(pu) => return PhaseVerdict::Jump(*pu),
        }
    }
    PhaseVerdict::Continue
}

fn is_local_here(pkt: &PacketState) -> bool {
    match &pkt.dst.addr {
        Addr::Local => true,
        Addr::Pu(pu) => *pu == pkt.location,
        Addr::External(_) => false,
    }
}

/// Run one packet through the pipeline to its terminal observation.
pub fn simulate_delivery(net: &Network, packet: &PacketState) -> SimOutcome {
    let mut pkt = packet.clone();
    let mut hits = 0u32;
    let mut hops = 0u32;
    let mut entry_phase = Phase::Output;

    loop {
        hops += 1;
        if hops > MAX_HOPS {
            return SimOutcome::RoutingLoop;
        }
        if let PhaseVerdict::Jump(next) = apply_phase(net, &mut pkt, entry_phase, &mut hits) {
            pkt.location = next;
            entry_phase = Phase::Prerouting;
            continue;
        }
        if is_local_here(&pkt) {
            if let PhaseVerdict::Jump(next) = apply_phase(net, &mut pkt, Phase::Input, &mut hits) {
                pkt.location = next;
                entry_phase = Phase::Prerouting;
                continue;
            }
            return match net.table.owner(&pkt.ns, pkt.proto, pkt.dst.port) {
                Some(owner) if owner == pkt.location => {
                    pkt.delivered_to = Some((pkt.location, pkt.dst.port));
                    SimOutcome::Delivered(DeliveryObservation {
                        receiver_pu: pkt.location,
                        receiver_port: pkt.dst.port,
                        final_dst: pkt.dst.clone(),
                        final_src: pkt.src.clone(),
                        observable_orig_dst: pkt.orig_dst.get(&pkt.location).cloned(),
                        rule_hits: hits,
                    })
                }
                _ => SimOutcome::NoReceiver,
            };
        }
        // not local: forward phase, then the implicit inter-PU link for
        // PU-addressed packets
        if let PhaseVerdict::Jump(next) = apply_phase(net, &mut pkt, Phase::Forward, &mut hits) {
            pkt.location = next;
            entry_phase = Phase::Prerouting;
            continue;
        }
        if let Addr::Pu(target) = pkt.dst.addr {
            if target != pkt.location {
                pkt.location = target;
                entry_phase = Phase::Prerouting;
                continue;
            }
        }
        return SimOutcome::Egress {
            final_src: pkt.src.clone(),
            final_dst: pkt.dst.clone(),
        };
    }
}

// ---------------------------------------------------------------------------
// Split-equivalence checking
// ---------------------------------------------------------------------------

use super::planner::{generate_forwarding_rules, split_rule};
use super::rules::FilterRule;
use super::NetnsError;

/// Where a logical binding lives relative to a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingPlacement {
    Sender,
    Receiver,
    Fixed(PuId),
}

#[derive(Debug, Clone)]
pub struct ScenarioBinding {
    pub ns: String,
    pub proto: Proto,
    pub port: u16,
    pub at: BindingPlacement,
}

#[derive(Debug, Clone)]
pub struct PacketSpec {
    pub ns: String,
    pub proto: Proto,
    pub src: AddrPort,
    pub dst: AddrPort,
}

/// Placement-independent view of an outcome: receiver identity is the port
/// (the logical process), not the PU it happens to run on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NormalizedOutcome {
    Delivered {
        receiver_port: u16,
        final_dst_port: u16,
        orig_dst: Option<AddrPort>,
    },
    Egress {
        final_dst: AddrPort,
    },
    NoReceiver,
    RoutingLoop,
}

fn normalize(outcome: &SimOutcome) -> NormalizedOutcome {
    match outcome {
        SimOutcome::Delivered(obs) => NormalizedOutcome::Delivered {
            receiver_port: obs.receiver_port,
            final_dst_port: obs.final_dst.port,
            orig_dst: obs.observable_orig_dst.clone(),
        },
        SimOutcome::Egress { final_dst, .. } => NormalizedOutcome::Egress {
            final_dst: final_dst.clone(),
        },
        SimOutcome::NoReceiver => NormalizedOutcome::NoReceiver,
        SimOutcome::RoutingLoop => NormalizedOutcome::RoutingLoop,
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub packet_index: usize,
    pub reference: NormalizedOutcome,
    pub actual: NormalizedOutcome,
}

#[derive(Debug, Clone)]
pub struct PlacementResult {
    pub sender: PuId,
    pub receiver: PuId,
    pub packets: usize,
    pub mismatches: Vec<Mismatch>,
}

impl PlacementResult {
    pub fn pass(&self) -> bool {
        self.mismatches.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub placements: Vec<PlacementResult>,
}

impl Verdict {
    pub fn pass(&self) -> bool {
        self.placements.iter().all(|p| p.pass())
    }
}

fn resolve(at: BindingPlacement, sender: PuId, receiver: PuId) -> PuId {
    match at {
        BindingPlacement::Sender => sender,
        BindingPlacement::Receiver => receiver,
        BindingPlacement::Fixed(pu) => pu,
    }
}

/// Build the single-PU reference world: the original rule as-is, everything
/// bound on one PU.
pub fn reference_network(
    rule: &FilterRule,
    bindings: &[ScenarioBinding],
) -> Result<Network, NetnsError> {
    let pu = PuId(0);
    let mut net = Network::default();
    let mut program = RuleProgram::new(pu);
    program.push(rule.clone());
    net.program(program);
    for b in bindings {
        net.table.register(&b.ns, b.proto, b.port, pu)?;
    }
    Ok(net)
}

/// Build the multi-PU world for one placement: the split rules plus the
/// port-table forwarding rules for direct calls.
pub fn placed_network(
    rule: &FilterRule,
    bindings: &[ScenarioBinding],
    sender: PuId,
    receiver: PuId,
) -> Result<Network, NetnsError> {
    let mut net = Network::default();
    for b in bindings {
        net.table
            .register(&b.ns, b.proto, b.port, resolve(b.at, sender, receiver))?;
    }
    let (sender_rules, receiver_rules) = split_rule(rule, sender, receiver)?;
    let mut pus: Vec<PuId> = vec![sender, receiver];
    for b in bindings {
        pus.push(resolve(b.at, sender, receiver));
    }
    pus.sort();
    pus.dedup();
    for pu in pus {
        let mut program = RuleProgram::new(pu);
        if pu == sender {
            for r in &sender_rules {
                program.push(r.clone());
            }
        }
        if pu == receiver {
            for r in &receiver_rules {
                program.push(r.clone());
            }
        }
        program.merge(generate_forwarding_rules(&net.table, pu));
        net.program(program);
    }
    Ok(net)
}

/// Run the reference and the split pipelines over every packet for every
/// placement; Pass means receiver identity, delivered destination, and
/// observable original destination all match everywhere.
pub fn equivalence_check(
    rule: &FilterRule,
    bindings: &[ScenarioBinding],
    packets: &[PacketSpec],
    placements: &[(PuId, PuId)],
) -> Result<Verdict, NetnsError> {
    let reference = reference_network(rule, bindings)?;
    let mut results = Vec::new();
    for &(sender, receiver) in placements {
        let placed = placed_network(rule, bindings, sender, receiver)?;
        let mut mismatches = Vec::new();
        for (i, spec) in packets.iter().enumerate() {
            let ref_pkt = PacketState::new(
                &spec.ns,
                spec.proto,
                spec.src.clone(),
                spec.dst.clone(),
                PuId(0),
            );
            let ref_out = normalize(&simulate_delivery(&reference, &ref_pkt));
            let placed_pkt = PacketState::new(
                &spec.ns,
                spec.proto,
                spec.src.clone(),
                spec.dst.clone(),
                sender,
            );
            let placed_out = normalize(&simulate_delivery(&placed, &placed_pkt));
            if ref_out != placed_out {
                mismatches.push(Mismatch {
                    packet_index: i,
                    reference: ref_out,
                    actual: placed_out,
                });
            }
        }
        results.push(PlacementResult {
            sender,
            receiver,
            packets: packets.len(),
            mismatches,
        });
    }
    Ok(Verdict {
        placements: results,
    })
}

/// All (sender, receiver) pairs over `count` PUs.
pub fn all_placements(count: u32) -> Vec<(PuId, PuId)> {
    let mut out = Vec::new();
    for s in 0..count {
        for r in 0..count {
            out.push((PuId(s), PuId(r)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netns::rules::{Action, EndpointPattern, MatchSpec, Phase};

    fn service_dst() -> AddrPort {
        "10.0.0.5:80".parse().unwrap()
    }

    fn intercept_rule() -> FilterRule {
        FilterRule {
            phase: Phase::Output,
            matches: MatchSpec {
                proto: Some(Proto::Tcp),
                dst: Some(EndpointPattern::exact(&service_dst())),
                ..MatchSpec::default()
            },
            action: Action::Redirect(15001),
        }
    }

    fn proxy_binding() -> ScenarioBinding {
        ScenarioBinding {
            ns: "default".into(),
            proto: Proto::Tcp,
            port: 15001,
            at: BindingPlacement::Receiver,
        }
    }

    #[test]
    fn direct_local_delivery_with_empty_programs() {
        let mut net = Network::default();
        net.table
            .register("default", Proto::Tcp, 7000, PuId(0))
            .unwrap();
        let pkt = PacketState::new(
            "default",
            Proto::Tcp,
            AddrPort::local(5555),
            AddrPort::local(7000),
            PuId(0),
        );
        let out = simulate_delivery(&net, &pkt);
        let obs = out.delivered().expect("delivered");
        assert_eq!(obs.receiver_pu, PuId(0));
        assert_eq!(obs.receiver_port, 7000);
        assert_eq!(obs.final_dst, AddrPort::local(7000));
        assert_eq!(obs.rule_hits, 0);
    }

    #[test]
    fn local_destination_without_binding_has_no_receiver() {
        let net = Network::default();
        let pkt = PacketState::new(
            "default",
            Proto::Tcp,
            AddrPort::local(5555),
            AddrPort::local(7000),
            PuId(0),
        );
        assert_eq!(simulate_delivery(&net, &pkt), SimOutcome::NoReceiver);
    }

    #[test]
    fn forward_cycle_is_a_routing_loop() {
        let mut net = Network::default();
        for (a, b) in [(0u32, 1u32), (1, 0)] {
            let mut program = RuleProgram::new(PuId(a));
            program.push(FilterRule {
                phase: if a == 0 { Phase::Output } else { Phase::Prerouting },
                matches: MatchSpec::default(),
                action: Action::ForwardToPu(PuId(b)),
            });
            // also bounce packets entering via prerouting on pu0
            if a == 0 {
                program.push(FilterRule {
                    phase: Phase::Prerouting,
                    matches: MatchSpec::default(),
                    action: Action::ForwardToPu(PuId(b)),
                });
            }
            net.program(program);
        }
        let pkt = PacketState::new(
            "default",
            Proto::Tcp,
            AddrPort::local(1),
            "10.0.0.9:80".parse().unwrap(),
            PuId(0),
        );
        assert_eq!(simulate_delivery(&net, &pkt), SimOutcome::RoutingLoop);
    }

    #[test]
    fn sidecar_split_preserves_orig_dst_at_receiver() {
        // app on pu0, proxy on pu1
        let rule = intercept_rule();
        let net = placed_network(&rule, &[proxy_binding()], PuId(0), PuId(1)).unwrap();
        let pkt = PacketState::new(
            "default",
            Proto::Tcp,
            AddrPort::local(5555),
            service_dst(),
            PuId(0),
        );
        let out = simulate_delivery(&net, &pkt);
        let obs = out.delivered().expect("delivered to proxy");
        assert_eq!(obs.receiver_pu, PuId(1));
        assert_eq!(obs.receiver_port, 15001);
        assert_eq!(obs.observable_orig_dst, Some(service_dst()));
    }

    #[test]
    fn naive_sender_rewrite_loses_orig_dst() {
        // the single-rewrite-on-sender approach: save + dnat on the sender PU
        let mut net = Network::default();
        net.table
            .register("default", Proto::Tcp, 15001, PuId(1))
            .unwrap();
        let mut program = RuleProgram::new(PuId(0));
        program.push(FilterRule {
            phase: Phase::Output,
            matches: MatchSpec::dst(&service_dst()),
            action: Action::SaveOrigDst,
        });
        program.push(FilterRule {
            phase: Phase::Output,
            matches: MatchSpec::dst(&service_dst()),
            action: Action::Dnat(AddrPort::new(Addr::Pu(PuId(1)), 15001)),
        });
        net.program(program);
        let pkt = PacketState::new(
            "default",
            Proto::Tcp,
            AddrPort::local(5555),
            service_dst(),
            PuId(0),
        );
        let out = simulate_delivery(&net, &pkt);
        let obs = out.delivered().expect("proxy still receives the packet");
        assert_eq!(obs.receiver_pu, PuId(1));
        // ...but the original destination was recorded on the sender's PU
        assert_eq!(obs.observable_orig_dst, None);
    }

    #[test]
    fn equivalence_passes_for_all_placements() {
        let rule = intercept_rule();
        let bindings = vec![
            proxy_binding(),
            ScenarioBinding {
                ns: "default".into(),
                proto: Proto::Tcp,
                port: 8080,
                at: BindingPlacement::Fixed(PuId(0)),
            },
        ];
        let packets: Vec<PacketSpec> = (0..16)
            .map(|i| match i % 4 {
                0 => PacketSpec {
                    ns: "default".into(),
                    proto: Proto::Tcp,
                    src: AddrPort::local(5000 + i as u16),
                    dst: service_dst(),
                },
                1 => PacketSpec {
                    ns: "default".into(),
                    proto: Proto::Tcp,
                    src: AddrPort::local(5000 + i as u16),
                    dst: AddrPort::local(8080),
                },
                2 => PacketSpec {
                    ns: "default".into(),
                    proto: Proto::Udp,
                    src: AddrPort::local(5000 + i as u16),
                    dst: service_dst(),
                },
                _ => PacketSpec {
                    ns: "default".into(),
                    proto: Proto::Tcp,
                    src: AddrPort::local(5000 + i as u16),
                    dst: "10.9.9.9:443".parse().unwrap(),
                },
            })
            .collect();
        let verdict =
            equivalence_check(&rule, &bindings, &packets, &all_placements(2)).unwrap();
        assert!(verdict.pass(), "{:#?}", verdict.placements);
        assert_eq!(verdict.placements.len(), 4);
    }

    #[test]
    fn identity_placement_passes_trivially() {
        let rule = intercept_rule();
        let packets = vec![PacketSpec {
            ns: "default".into(),
            proto: Proto::Tcp,
            src: AddrPort::local(5555),
            dst: service_dst(),
        }];
        let verdict = equivalence_check(
            &rule,
            &[proxy_binding()],
            &packets,
            &[(PuId(0), PuId(0))],
        )
        .unwrap();
        assert!(verdict.pass());
    }

    #[test]
    fn simulation_is_deterministic() {
        let rule = intercept_rule();
        let net = placed_network(&rule, &[proxy_binding()], PuId(0), PuId(1)).unwrap();
        let pkt = PacketState::new(
            "default",
            Proto::Tcp,
            AddrPort::local(5555),
            service_dst(),
            PuId(0),
        );
        let a = simulate_delivery(&net, &pkt);
        let b = simulate_delivery(&net, &pkt);
        assert_eq!(a, b);
    }
}
