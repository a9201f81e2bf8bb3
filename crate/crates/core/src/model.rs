//! Text persistence of a learned model.
//!
//! ```text
//! EIDS-MODEL 1
//! FLOW  tcp  192.168.1.50  192.168.1.101  502
//! FLOW  arp  02:00:00:00:00:32  192.168.1.101  0
//! ARP  192.168.1.50  02:00:00:00:00:32
//! TIMING  tcp  192.168.1.50  192.168.1.101  502  100012  98011  102004  5990  300
//! ```
//!
//! Fields are tab separated. For `arp` and `other` flows the peer column
//! holds the MAC address. Durations are whole microseconds.

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::flow::{FlowKey, FlowKind};
use crate::packet::MacAddr;

pub const HEADER: &str = "EIDS-MODEL 1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unsupported model header {0:?}")]
    BadModelVersion(String),
    #[error("malformed model line {line}: {reason}")]
    MalformedModelLine { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingRecord {
    pub mean_us: u64,
    pub min_us: u64,
    pub max_us: u64,
    pub n_l: u64,
    pub delta_milli: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Model {
    pub flows: Vec<FlowKey>,
    pub bindings: Vec<(Ipv4Addr, MacAddr)>,
    pub timings: Vec<(FlowKey, TimingRecord)>,
}

fn key_columns(k: &FlowKey) -> String {
    format!("{}\t{}\t{}\t{}", k.kind, k.peer_string(), k.local_ip, k.service_port)
}

impl Model {
    /// Canonical text; sections and records are sorted, so equal models
    /// render to equal bytes.
    pub fn render(&self) -> String {
        let mut flows = self.flows.clone();
        flows.sort();
        flows.dedup();
        let mut bindings = self.bindings.clone();
        bindings.sort();
        let mut timings = self.timings.clone();
        timings.sort_by_key(|(k, _)| *k);

        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for k in &flows {
            out.push_str(&format!("FLOW\t{}\n", key_columns(k)));
        }
        for (ip, mac) in &bindings {
            out.push_str(&format!("ARP\t{ip}\t{mac}\n"));
        }
        for (k, t) in &timings {
            out.push_str(&format!(
                "TIMING\t{}\t{}\t{}\t{}\t{}\t{}\n",
                key_columns(k),
                t.mean_us,
                t.min_us,
                t.max_us,
                t.n_l,
                t.delta_milli
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Model, ModelError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == HEADER => {}
            Some((_, h)) => return Err(ModelError::BadModelVersion(h.trim_end().to_string())),
            None => return Err(ModelError::BadModelVersion(String::new())),
        }
        let mut model = Model::default();
        for (idx, raw) in lines {
            let line = idx + 1;
            let raw = raw.trim_end_matches('\r');
            if raw.is_empty() {
                continue;
            }
            let bad = |reason: &str| ModelError::MalformedModelLine {
                line,
                reason: reason.to_string(),
            };
            let cols: Vec<&str> = raw.split('\t').collect();
            match cols[0] {
                "FLOW" if cols.len() == 5 => {
                    model.flows.push(parse_key(&cols[1..5]).map_err(|r| bad(&r))?);
                }
                "ARP" if cols.len() == 3 => {
                    let ip = cols[1].parse().map_err(|_| bad("bad IPv4 address"))?;
                    let mac = cols[2].parse().map_err(|_| bad("bad MAC address"))?;
                    model.bindings.push((ip, mac));
                }
                "TIMING" if cols.len() == 10 => {
                    let key = parse_key(&cols[1..5]).map_err(|r| bad(&r))?;
                    let num = |i: usize| -> Result<u64, ModelError> {
                        cols[i].parse().map_err(|_| bad("bad integer"))
                    };
                    let rec = TimingRecord {
                        mean_us: num(5)?,
                        min_us: num(6)?,
                        max_us: num(7)?,
                        n_l: num(8)?,
                        delta_milli: u32::try_from(num(9)?).map_err(|_| bad("bad tolerance"))?,
                    };
                    if rec.n_l < 2 || rec.min_us == 0 || rec.min_us > rec.max_us {
                        return Err(bad("inconsistent baseline"));
                    }
                    model.timings.push((key, rec));
                }
                "FLOW" | "ARP" | "TIMING" => return Err(bad("wrong number of fields")),
                _ => return Err(bad("unknown record type")),
            }
        }
        Ok(model)
    }
}

fn parse_key(cols: &[&str]) -> Result<FlowKey, String> {
    let kind = FlowKind::parse(cols[0]).ok_or_else(|| format!("unknown flow kind {:?}", cols[0]))?;
    let local: Ipv4Addr = cols[2].parse().map_err(|_| "bad local address".to_string())?;
    let port: u16 = cols[3].parse().map_err(|_| "bad port".to_string())?;
    if kind.is_ip() {
        let peer: Ipv4Addr = cols[1].parse().map_err(|_| "bad peer address".to_string())?;
        Ok(FlowKey::ip(kind, peer, local, port))
    } else {
        let peer: MacAddr = cols[1].parse().map_err(|_| "bad peer MAC".to_string())?;
        if port != 0 {
            return Err("link-level flow with a port".to_string());
        }
        Ok(FlowKey::link(kind, peer, local))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Model {
        let local = Ipv4Addr::new(192, 168, 1, 101);
        let plc = Ipv4Addr::new(192, 168, 1, 50);
        let plc_mac = MacAddr::new(2, 0, 0, 0, 0, 0x32);
        let tcp = FlowKey::ip(FlowKind::Tcp, plc, local, 502);
        Model {
            flows: vec![FlowKey::link(FlowKind::Arp, plc_mac, local), tcp],
            bindings: vec![(plc, plc_mac)],
            timings: vec![(
                tcp,
                TimingRecord {
                    mean_us: 100_012,
                    min_us: 98_011,
                    max_us: 102_004,
                    n_l: 5990,
                    delta_milli: 300,
                },
            )],
        }
    }

    #[test]
    fn render_parse_render() {
        let text = sample().render();
        assert!(text.starts_with("EIDS-MODEL 1\nFLOW\ttcp\t192.168.1.50\t192.168.1.101\t502\n"));
        assert!(text.contains("FLOW\tarp\t02:00:00:00:00:32\t192.168.1.101\t0\n"));
        let again = Model::parse(&text).unwrap().render();
        assert_eq!(text, again);
    }

    #[test]
    fn wrong_version() {
        assert_eq!(
            Model::parse("EIDS-MODEL 2\n"),
            Err(ModelError::BadModelVersion("EIDS-MODEL 2".into()))
        );
        assert!(matches!(Model::parse(""), Err(ModelError::BadModelVersion(_))));
    }

    #[test]
    fn malformed_lines() {
        for body in [
            "FLOW\ttcp\t1.2.3.4\t1.2.3.5",
            "FLOW\tsctp\t1.2.3.4\t1.2.3.5\t1",
            "ARP\t1.2.3.4\tzz:00:00:00:00:00",
            "TIMING\ttcp\t1.2.3.4\t1.2.3.5\t1\t10\t20\t5\t3\t300",
            "HELLO",
        ] {
            let text = format!("{HEADER}\n{body}\n");
            assert!(
                matches!(Model::parse(&text), Err(ModelError::MalformedModelLine { line: 2, .. })),
                "{body}"
            );
        }
    }
}
