//! Key/value config files: the allocation policy and the notify controller.
//!
//! Format: one `key = value` per line, `#` comments. Values are integers with
//! an optional binary size suffix (`K`/`KiB`, `M`/`MiB`, `G`/`GiB`). Absent
//! keys keep their defaults; unknown keys are rejected.

use thiserror::Error;

use crate::arena::AllocationPolicy;
use crate::unapi::UnapiConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid policy: {0}")]
    Invalid(String),
}

fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = match raw.split_once('#') {
            Some((before, _)) => before.trim(),
            None => raw.trim(),
        };
        if trimmed.is_empty() {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Parse {
            line,
            msg: format!("expected key = value, got {trimmed:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Parse {
                line,
                msg: "empty key or value".into(),
            });
        }
        out.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// `"64KiB"` → 65536. Plain integers pass through.
pub fn parse_size(text: &str) -> Option<u64> {
    let text = text.trim();
    let (digits, multiplier) = if let Some(d) = text
        .strip_suffix("KiB")
        .or_else(|| text.strip_suffix('K'))
        .or_else(|| text.strip_suffix('k'))
    {
        (d, 1024u64)
    } else if let Some(d) = text
        .strip_suffix("MiB")
        .or_else(|| text.strip_suffix('M'))
        .or_else(|| text.strip_suffix('m'))
    {
        (d, 1024 * 1024)
    } else if let Some(d) = text
        .strip_suffix("GiB")
        .or_else(|| text.strip_suffix('G'))
        .or_else(|| text.strip_suffix('g'))
    {
        (d, 1024 * 1024 * 1024)
    } else {
        (text, 1)
    };
    let n: u64 = digits.trim().parse().ok()?;
    n.checked_mul(multiplier)
}

fn size_value(line: usize, key: &str, value: &str) -> Result<u64, ConfigError> {
    parse_size(value).ok_or_else(|| ConfigError::Parse {
        line,
        msg: format!("{key} wants an integer (optionally K/M/G suffixed), got {value:?}"),
    })
}

/// Parse a policy file on top of the defaults. Exactly the five policy keys
/// are accepted.
pub fn parse_policy(text: &str) -> Result<AllocationPolicy, ConfigError> {
    let mut policy = AllocationPolicy::default();
    for (line, key, value) in parse_kv(text)? {
        let v = size_value(line, &key, &value)?;
        match key.as_str() {
            "max_records_per_channel" => policy.max_records_per_channel = v as u32,
            "max_records_per_process" => policy.max_records_per_process = v as u32,
            "record_size_bytes" => policy.record_size_bytes = v as u32,
            "arena_size_bytes" => policy.arena_size_bytes = v,
            "local_record_bytes" => policy.local_record_bytes = v as u32,
            _ => return Err(ConfigError::UnknownKey { line, key }),
        }
    }
    policy.validate().map_err(ConfigError::Invalid)?;
    Ok(policy)
}

/// Parse the notify-controller config (`spin_budget`, `burst_threshold`,
/// `burst_window_us`) on top of the defaults.
pub fn parse_unapi_config(text: &str) -> Result<UnapiConfig, ConfigError> {
    let mut config = UnapiConfig::default();
    for (line, key, value) in parse_kv(text)? {
        let v = size_value(line, &key, &value)?;
        match key.as_str() {
            "spin_budget" => config.spin_budget = v as u32,
            "burst_threshold" => config.burst_threshold = v as u32,
            "burst_window_us" => config.burst_window_us = v,
            _ => return Err(ConfigError::UnknownKey { line, key }),
        }
    }
    Ok(config)
}
