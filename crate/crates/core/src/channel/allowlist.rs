//! Connection allowlist: which peers may use the shared-memory data path.
//!
//! File format, one rule per line:
//!
//! ```text
//! allow <host-pattern>:<port-pattern>
//! deny  <host-pattern>:<port-pattern>
//! ```
//!
//! `*` is a wildcard within either pattern. Rules evaluate top-down, first
//! match wins, and an implicit `deny *:*` closes every list, so a connection
//! that matches nothing falls back to the ordinary socket.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllowlistError {
    #[error("line {line}: expected `allow|deny <host>:<port>`, got {text:?}")]
    BadRule { line: usize, text: String },
    #[error("line {line}: missing `:` between host and port")]
    MissingPort { line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowRule {
    pub permit: bool,
    pub host: String,
    pub port: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allowlist {
    rules: Vec<AllowRule>,
}

impl Allowlist {
    /// Empty list: everything denied (pure fallback).
    pub fn deny_all() -> Allowlist {
        Allowlist::default()
    }

    pub fn allow_all() -> Allowlist {
        Allowlist {
            rules: vec![AllowRule {
                permit: true,
                host: "*".into(),
                port: "*".into(),
            }],
        }
    }

    pub fn parse(text: &str) -> Result<Allowlist, AllowlistError> {
        let mut rules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (verb, rest) = match trimmed.split_once(char::is_whitespace) {
                Some(pair) => pair,
                None => {
                    return Err(AllowlistError::BadRule {
                        line,
                        text: trimmed.to_string(),
                    })
                }
            };
            let permit = match verb {
                "allow" => true,
                "deny" => false,
                _ => {
                    return Err(AllowlistError::BadRule {
                        line,
                        text: trimmed.to_string(),
                    })
                }
            };
            let target = rest.trim();
            // split at the last colon so bare IPv6-ish text still parses
            let (host, port) = match target.rsplit_once(':') {
                Some(pair) => pair,
                None => return Err(AllowlistError::MissingPort { line }),
            };
            if host.is_empty() || port.is_empty() {
                return Err(AllowlistError::BadRule {
                    line,
                    text: trimmed.to_string(),
                });
            }
            rules.push(AllowRule {
                permit,
                host: host.to_string(),
                port: port.to_string(),
            });
        }
        Ok(Allowlist { rules })
    }

    pub fn rules(&self) -> &[AllowRule] {
        &self.rules
    }

    /// First matching rule wins; no match means deny.
    pub fn permits(&self, host: &str, port: u16) -> bool {
        let port_text = port.to_string();
        for rule in &self.rules {
            if glob_match(&rule.host, host) && glob_match(&rule.port, &port_text) {
                return rule.permit;
            }
        }
        false
    }
}

/// `*`-wildcard matcher (any number of stars, no character classes).
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_basics() {
        assert!(glob_match("*", "anything"));
        assert!(glob_match("127.0.0.*", "127.0.0.1"));
        assert!(!glob_match("127.0.0.*", "10.0.0.1"));
        assert!(glob_match("70*", "7000"));
        assert!(glob_match("*.internal", "pu1.internal"));
        assert!(!glob_match("", "x"));
        assert!(glob_match("", ""));
        assert!(glob_match("a*b*c", "axxbyyc"));
        assert!(!glob_match("a*b*c", "axxbyy"));
    }

    #[test]
    fn first_match_wins_with_default_deny() {
        let list = Allowlist::parse(
            "# comment\n\
             deny 127.0.0.1:9000\n\
             allow 127.0.0.1:*\n\
             allow *.internal:7000\n",
        )
        .unwrap();
        assert!(!list.permits("127.0.0.1", 9000));
        assert!(list.permits("127.0.0.1", 7000));
        assert!(list.permits("pu1.internal", 7000));
        assert!(!list.permits("pu1.internal", 7001));
        // implicit trailing deny
        assert!(!list.permits("example.com", 80));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert_eq!(
            Allowlist::parse("allow 127.0.0.1"),
            Err(AllowlistError::MissingPort { line: 1 })
        );
        assert_eq!(
            Allowlist::parse("\npermit x:1"),
            Err(AllowlistError::BadRule {
                line: 2,
                text: "permit x:1".into()
            })
        );
        assert_eq!(
            Allowlist::parse("allow"),
            Err(AllowlistError::BadRule {
                line: 1,
                text: "allow".into()
            })
        );
    }

    #[test]
    fn empty_list_denies_everything() {
        let list = Allowlist::parse("").unwrap();
        assert!(!list.permits("127.0.0.1", 7000));
    }
}
