//! Rule generation: port-table compilation for direct calls, and the
//! partially idempotent split for interception rules.

use super::rules::{Action, EndpointPattern, FilterRule, MatchSpec, Phase, RuleProgram};
use super::table::PortTable;
use super::{Addr, AddrPort, NetnsError, PuId};

/// Compile the port table into the forwarding program for one PU. Every
/// binding owned elsewhere gets an Output DNAT to the owner's inter-PU
/// address, a reply-path SNAT, and the forward-link rule; local bindings get
/// nothing, so the local path hits zero rules.
pub fn generate_forwarding_rules(table: &PortTable, pu: PuId) -> RuleProgram {
    let mut program = RuleProgram::new(pu);
    for (ns, proto, port, owner) in table.iter() {
        if owner == pu {
            continue;
        }
        let match_local = MatchSpec {
            ns: Some(ns.to_string()),
            proto: Some(proto),
            dst: Some(EndpointPattern::exact(&AddrPort::local(port))),
            ..MatchSpec::default()
        };
        program.push(FilterRule {
            phase: Phase::Output,
            matches: match_local,
            action: Action::Dnat(AddrPort::new(Addr::Pu(owner), port)),
        });
        let match_owner = MatchSpec {
            ns: Some(ns.to_string()),
            proto: Some(proto),
            dst: Some(EndpointPattern::exact(&AddrPort::new(
                Addr::Pu(owner),
                port,
            ))),
            ..MatchSpec::default()
        };
        program.push(FilterRule {
            phase: Phase::Forward,
            matches: match_owner.clone(),
            action: Action::Snat(Addr::Pu(pu)),
        });
        program.push(FilterRule {
            phase: Phase::Forward,
            matches: match_owner,
            action: Action::ForwardToPu(owner),
        });
    }
    program
}

/// Split one rule for a (sender PU, receiver PU) placement.
///
/// The supported family is the `Redirect` interception pattern (destination
/// rewrite plus original-destination recording) and plain forwarding
/// (`Accept`, `ForwardToPu`), which pass through on the sender side. The
/// split produces three rules: route-to-receiver-PU on the sender (packet
/// unmodified), route-to-container on the receiver, and rewrite-and-save on
/// the receiver — so the original destination is recorded on the PU where it
/// will be queried. Re-applying the routing is redundant but side-effect
/// free.
pub fn split_rule(
    rule: &FilterRule,
    sender: PuId,
    receiver: PuId,
) -> Result<(Vec<FilterRule>, Vec<FilterRule>), NetnsError> {
    if sender == receiver {
        // degenerate split: the original single-PU rule
        return match rule.action {
            Action::Redirect(_) | Action::Accept | Action::ForwardToPu(_) => {
                Ok((vec![rule.clone()], Vec::new()))
            }
            _ => Err(NetnsError::UnsupportedRuleKind(
                rule.action.kind_name().to_string(),
            )),
        };
    }
    match rule.action {
        Action::Redirect(port) => {
            let sender_rules = vec![FilterRule {
                phase: rule.phase,
                matches: rule.matches.clone(),
                action: Action::ForwardToPu(receiver),
            }];
            let receiver_rules = vec![
                // (2) admit the rewritten packet into the receiving container
                FilterRule {
                    phase: Phase::Input,
                    matches: MatchSpec {
                        ns: rule.matches.ns.clone(),
                        proto: rule.matches.proto,
                        dst: Some(EndpointPattern::exact(&AddrPort::local(port))),
                        ..MatchSpec::default()
                    },
                    action: Action::Accept,
                },
                // (3) rewrite and record the original destination here
                FilterRule {
                    phase: Phase::Prerouting,
                    matches: rule.matches.clone(),
                    action: Action::Redirect(port),
                },
            ];
            Ok((sender_rules, receiver_rules))
        }
        Action::Accept | Action::ForwardToPu(_) => Ok((vec![rule.clone()], Vec::new())),
        _ => Err(NetnsError::UnsupportedRuleKind(
            rule.action.kind_name().to_string(),
        )),
    }
}
