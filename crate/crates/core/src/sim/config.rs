//! `key = value` text format for simulation runs.
//!
//! ```text
//! seed = 7
//! duration = 2h
//! response_delay = 1ms..5ms
//! scenario = dos target=S1 start=660s rate=1000 duration=30s
//! ```

use std::time::Duration;

use super::{invalid, AttackScenario, ScenarioKind, SimConfig, SimError};

/// Parses `250us`, `100ms`, `10s`, `5m`, `2h`. A bare number means seconds.
pub fn parse_duration(s: &str) -> Option<Duration> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().ok()?;
    let us = match unit.trim() {
        "us" => 1,
        "ms" => 1_000,
        "" | "s" => 1_000_000,
        "m" | "min" => 60_000_000,
        "h" => 3_600_000_000,
        _ => return None,
    };
    n.checked_mul(us).map(Duration::from_micros)
}

/// Shortest exact rendering that [`parse_duration`] reads back.
pub fn format_duration(d: Duration) -> String {
    let us = d.as_micros() as u64;
    if us == 0 {
        return "0s".into();
    }
    for (unit, scale) in [("h", 3_600_000_000u64), ("m", 60_000_000), ("s", 1_000_000), ("ms", 1_000)] {
        if us.is_multiple_of(scale) {
            return format!("{}{unit}", us / scale);
        }
    }
    format!("{us}us")
}

fn duration_value(key: &str, v: &str) -> Result<Duration, String> {
    parse_duration(v).ok_or_else(|| format!("{key}: bad duration {v:?}"))
}

/// `kind key=value ...`
pub fn parse_scenario(s: &str) -> Result<AttackScenario, String> {
    let mut words = s.split_whitespace();
    let kind = words.next().ok_or("empty scenario")?;
    let kind = ScenarioKind::parse(kind).ok_or_else(|| format!("unknown scenario {kind:?}"))?;
    let mut sc = AttackScenario::new(kind, Duration::ZERO);
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| format!("expected key=value, got {w:?}"))?;
        match k {
            "target" => sc.target = v.to_string(),
            "start" => sc.start = duration_value(k, v)?,
            "duration" => sc.duration = Some(duration_value(k, v)?),
            "period" => sc.period = duration_value(k, v)?,
            "rate" => sc.rate = v.parse().map_err(|_| format!("rate: bad number {v:?}"))?,
            _ => return Err(format!("unknown scenario option {k:?}")),
        }
    }
    Ok(sc)
}

pub fn parse_config(text: &str) -> Result<SimConfig, SimError> {
    let mut cfg = SimConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| invalid(format!("line {}: {msg}", n + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let p = &mut cfg.profile;
        match key {
            "seed" => cfg.seed = value.parse().map_err(|_| at(format!("seed: bad number {value:?}")))?,
            "duration" => cfg.duration = duration_value(key, value).map_err(at)?,
            "poll_period" => p.poll_period = duration_value(key, value).map_err(at)?,
            "response_delay" => {
                let (lo, hi) = value
                    .split_once("..")
                    .ok_or_else(|| at("response_delay: expected lo..hi".into()))?;
                p.response_delay = (
                    duration_value(key, lo).map_err(at)?,
                    duration_value(key, hi).map_err(at)?,
                );
            }
            "jitter" => p.jitter = value.parse().map_err(|_| at(format!("jitter: bad number {value:?}")))?,
            "plc_timeout" => p.plc_timeout = duration_value(key, value).map_err(at)?,
            "arp_expiry_mean" => p.arp_expiry_mean = duration_value(key, value).map_err(at)?,
            "arp_expiry_spread" => p.arp_expiry_spread = duration_value(key, value).map_err(at)?,
            "keepalive" => p.keepalive_period = duration_value(key, value).map_err(at)?,
            "learning" => p.learning = duration_value(key, value).map_err(at)?,
            "saturation_rate" => {
                p.saturation_rate = value
                    .parse()
                    .map_err(|_| at(format!("saturation_rate: bad number {value:?}")))?
            }
            "scenario" => cfg.scenarios.push(parse_scenario(value).map_err(at)?),
            _ => return Err(at(format!("unknown key {key:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
