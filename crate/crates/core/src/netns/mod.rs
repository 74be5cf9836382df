//! Split-network-namespace control plane.
//!
//! Processes of one logical namespace may live on different processing units
//! (PUs), each with its own kernel. Two mechanisms keep `localhost` semantics
//! working across that split:
//!
//! * a globally shared [`PortTable`] reverse-maps every bound port to its
//!   owning PU, and [`planner::generate_forwarding_rules`] turns the table
//!   into per-PU DNAT/SNAT/forward programs so direct calls reach the right
//!   PU with zero rewriting on the local path;
//! * interception rules (the sidecar pattern) are split by
//!   [`planner::split_rule`] into sender-side routing plus receiver-side
//!   rewrite-and-save rules, so redundant application changes nothing and the
//!   original destination is recorded on the PU where it will be queried.
//!
//! [`sim`] provides a deterministic packet-pipeline simulator and the
//! equivalence check validating rule splits against single-PU semantics.

pub mod planner;
pub mod rules;
pub mod scenario;
pub mod sim;
pub mod table;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// A processing unit (CPU complex or DPU); synthetic address `pu<k>.internal`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PuId(pub u32);

impl fmt::Display for PuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pu{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proto {
    Tcp,
    Udp,
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Proto::Tcp => write!(f, "tcp"),
            Proto::Udp => write!(f, "udp"),
        }
    }
}

impl FromStr for Proto {
    type Err = NetnsError;

    fn from_str(s: &str) -> Result<Proto, NetnsError> {
        match s {
            "tcp" => Ok(Proto::Tcp),
            "udp" => Ok(Proto::Udp),
            other => Err(NetnsError::Parse {
                line: 0,
                msg: format!("unknown protocol {other:?}"),
            }),
        }
    }
}

/// Address within (or outside) the split namespace. `Local` is `localhost`;
/// `Pu(k)` is the inter-PU address `pu<k>.internal`; anything else is an
/// external destination.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Addr {
    Local,
    Pu(PuId),
    External(String),
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Local => write!(f, "local"),
            Addr::Pu(pu) => write!(f, "{pu}.internal"),
            Addr::External(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for Addr {
    type Err = NetnsError;

    fn from_str(s: &str) -> Result<Addr, NetnsError> {
        if s.is_empty() {
            return Err(NetnsError::Parse {
                line: 0,
                msg: "empty address".into(),
            });
        }
        if s == "local" || s == "localhost" || s == "127.0.0.1" {
            return Ok(Addr::Local);
        }
        let bare = s.strip_suffix(".internal").unwrap_or(s);
        if let Some(num) = bare.strip_prefix("pu") {
            if let Ok(k) = num.parse::<u32>() {
                return Ok(Addr::Pu(PuId(k)));
            }
        }
        Ok(Addr::External(s.to_string()))
    }
}

/// `addr:port` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AddrPort {
    pub addr: Addr,
    pub port: u16,
}

impl AddrPort {
    pub fn new(addr: Addr, port: u16) -> AddrPort {
        AddrPort { addr, port }
    }

    pub fn local(port: u16) -> AddrPort {
        AddrPort {
            addr: Addr::Local,
            port,
        }
    }
}

impl fmt::Display for AddrPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.addr, self.port)
    }
}

impl FromStr for AddrPort {
    type Err = NetnsError;

    fn from_str(s: &str) -> Result<AddrPort, NetnsError> {
        let (addr, port) = s.rsplit_once(':').ok_or_else(|| NetnsError::Parse {
            line: 0,
            msg: format!("expected addr:port, got {s:?}"),
        })?;
        let port = port.parse::<u16>().map_err(|_| NetnsError::Parse {
            line: 0,
            msg: format!("bad port in {s:?}"),
        })?;
        Ok(AddrPort {
            addr: addr.parse()?,
            port,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetnsError {
    #[error("port {port} ({proto}, ns {ns}) is already bound to {owner}")]
    Conflict {
        ns: String,
        proto: Proto,
        port: u16,
        owner: PuId,
    },
    #[error("rule kind {0:?} is outside the supported split family")]
    UnsupportedRuleKind(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addr_parse_and_display() {
        assert_eq!("localhost".parse::<Addr>().unwrap(), Addr::Local);
        assert_eq!("127.0.0.1".parse::<Addr>().unwrap(), Addr::Local);
        assert_eq!("pu2.internal".parse::<Addr>().unwrap(), Addr::Pu(PuId(2)));
        assert_eq!("pu2".parse::<Addr>().unwrap(), Addr::Pu(PuId(2)));
        assert_eq!(
            "10.0.0.5".parse::<Addr>().unwrap(),
            Addr::External("10.0.0.5".into())
        );
        assert_eq!(Addr::Pu(PuId(1)).to_string(), "pu1.internal");
        let ap: AddrPort = "10.0.0.5:80".parse().unwrap();
        assert_eq!(ap.port, 80);
        assert!("nocolon".parse::<AddrPort>().is_err());
    }
}
