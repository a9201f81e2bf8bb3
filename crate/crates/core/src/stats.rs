//! Inter-arrival statistics over captured traffic.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;

use crate::flow::{FlowKey, FlowKind, FlowTable, Mode};
use crate::packet::{ArpOp, Direction, PacketMeta};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Tcp,
    Udp,
    Arp,
    /// ARP requests asking for the local address.
    ArpRequest,
    Other,
    All,
}

/// Selects packets by protocol, service port and direction.
///
/// Grammar: `tcp[:port]`, `udp[:port]`, `arp`, `arp-req`, `other` or `all`,
/// optionally followed by `/rx` or `/tx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowFilter {
    class: Class,
    port: Option<u16>,
    direction: Option<Direction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadFilter(pub String);

impl fmt::Display for BadFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bad flow filter {:?}", self.0)
    }
}

impl std::error::Error for BadFilter {}

impl FromStr for FlowFilter {
    type Err = BadFilter;

    fn from_str(s: &str) -> Result<Self, BadFilter> {
        let bad = || BadFilter(s.to_string());
        let (body, direction) = match s.rsplit_once('/') {
            Some((b, "rx")) => (b, Some(Direction::Rx)),
            Some((b, "tx")) => (b, Some(Direction::Tx)),
            Some(_) => return Err(bad()),
            None => (s, None),
        };
        let (name, port) = match body.split_once(':') {
            Some((n, p)) => (n, Some(p.parse::<u16>().map_err(|_| bad())?)),
            None => (body, None),
        };
        let class = match name {
            "tcp" => Class::Tcp,
            "udp" => Class::Udp,
            "arp" => Class::Arp,
            "arp-req" => Class::ArpRequest,
            "other" => Class::Other,
            "all" => Class::All,
            _ => return Err(bad()),
        };
        if port.is_some() && !matches!(class, Class::Tcp | Class::Udp) {
            return Err(bad());
        }
        Ok(FlowFilter { class, port, direction })
    }
}

impl FlowFilter {
    pub const ALL: FlowFilter = FlowFilter {
        class: Class::All,
        port: None,
        direction: None,
    };

    pub fn matches(&self, meta: &PacketMeta, key: &FlowKey, local_ip: Ipv4Addr) -> bool {
        if self.direction.is_some_and(|d| d != meta.direction) {
            return false;
        }
        if self.port.is_some_and(|p| p != key.service_port) {
            return false;
        }
        match self.class {
            Class::All => true,
            Class::Tcp => key.kind == FlowKind::Tcp,
            Class::Udp => key.kind == FlowKind::Udp,
            Class::Arp => key.kind == FlowKind::Arp,
            Class::Other => key.kind == FlowKind::OtherEth,
            Class::ArpRequest => meta
                .arp()
                .is_some_and(|a| a.op == ArpOp::Request && a.target_ip == local_ip),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interarrival {
    pub key: FlowKey,
    pub at: Timestamp,
    pub interarrival_us: u64,
}

/// Per-flow gaps between consecutive matching packets. Keys come from a
/// learning-mode flow table, so both directions of a connection share one.
#[derive(Debug, Clone)]
pub struct InterarrivalSampler {
    table: FlowTable,
    filter: FlowFilter,
    last: BTreeMap<FlowKey, Timestamp>,
}

impl InterarrivalSampler {
    pub fn new(local_ip: Ipv4Addr, filter: FlowFilter) -> Self {
        InterarrivalSampler {
            table: FlowTable::new(local_ip),
            filter,
            last: BTreeMap::new(),
        }
    }

    /// Returns a sample for every matching packet except a flow's first.
    pub fn push(&mut self, meta: &PacketMeta) -> Option<Interarrival> {
        let key = self.table.observe(meta, Mode::Learning).key;
        if !self.filter.matches(meta, &key, self.table.local_ip()) {
            return None;
        }
        let prev = self.last.insert(key, meta.timestamp)?;
        Some(Interarrival {
            key,
            at: meta.timestamp,
            interarrival_us: meta.timestamp.saturating_since(prev).as_micros() as u64,
        })
    }
}

/// Streaming count, mean, min and max.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Summary {
    pub count: u64,
    sum: u128,
    pub min_us: u64,
    pub max_us: u64,
}

impl Summary {
    pub fn add(&mut self, us: u64) {
        if self.count == 0 {
            self.min_us = us;
            self.max_us = us;
        } else {
            self.min_us = self.min_us.min(us);
            self.max_us = self.max_us.max(us);
        }
        self.count += 1;
        self.sum += u128::from(us);
    }

    pub fn mean_us(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }
}

pub const CSV_HEADER: &str = "flow,timestamp_us,interarrival_us";

pub fn write_csv_row<W: Write>(out: &mut W, s: &Interarrival) -> io::Result<()> {
    writeln!(out, "{},{},{}", s.key, s.at.as_micros(), s.interarrival_us)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{arp_frame, tcp_frame, TcpSegment};
    use crate::packet::{parse_frame, ArpMeta, MacAddr, TcpFlags};

    const LOCAL: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
    const PEER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);

    fn tcp(at: u64, rx: bool) -> PacketMeta {
        let (a, b) = (MacAddr::new(2, 0, 0, 0, 0, 1), MacAddr::new(2, 0, 0, 0, 0, 2));
        let (src_mac, dst_mac, src_ip, dst_ip, sp, dp) = if rx {
            (a, b, PEER, LOCAL, 40000, 502)
        } else {
            (b, a, LOCAL, PEER, 502, 40000)
        };
        let f = tcp_frame(&TcpSegment {
            src_mac,
            dst_mac,
            src_ip,
            dst_ip,
            src_port: sp,
            dst_port: dp,
            seq: 0,
            ack: 0,
            flags: TcpFlags::PSH | TcpFlags::ACK,
            ip_id: 0,
            payload: &[1, 2, 3],
        });
        let dir = if rx { Direction::Rx } else { Direction::Tx };
        parse_frame(&f, Timestamp::from_micros(at), dir).unwrap()
    }

    #[test]
    fn filter_grammar() {
        for ok in ["tcp", "tcp:502", "udp:47808/tx", "arp", "arp-req/rx", "other", "all/rx"] {
            assert!(ok.parse::<FlowFilter>().is_ok(), "{ok}");
        }
        for bad in ["", "icmp", "tcp:x", "arp:1", "tcp/up", "tcp:70000"] {
            assert!(bad.parse::<FlowFilter>().is_err(), "{bad}");
        }
    }

    #[test]
    fn directions_share_a_key() {
        let mut both = InterarrivalSampler::new(LOCAL, "tcp:502".parse().unwrap());
        let mut rx = InterarrivalSampler::new(LOCAL, "tcp:502/rx".parse().unwrap());
        let trace = [tcp(0, true), tcp(2_000, false), tcp(100_000, true), tcp(103_000, false)];
        let a: Vec<u64> = trace.iter().filter_map(|m| both.push(m)).map(|s| s.interarrival_us).collect();
        let b: Vec<u64> = trace.iter().filter_map(|m| rx.push(m)).map(|s| s.interarrival_us).collect();
        assert_eq!(a, vec![2_000, 98_000, 3_000]);
        assert_eq!(b, vec![100_000]);
    }

    #[test]
    fn arp_requests_for_local_only() {
        let mac = MacAddr::new(2, 0, 0, 0, 0, 1);
        let req = |at: u64, target: Ipv4Addr| {
            let f = arp_frame(
                mac,
                MacAddr::BROADCAST,
                &ArpMeta {
                    op: ArpOp::Request,
                    sender_mac: mac,
                    sender_ip: PEER,
                    target_mac: MacAddr::ZERO,
                    target_ip: target,
                },
            );
            parse_frame(&f, Timestamp::from_secs(at), Direction::Rx).unwrap()
        };
        let mut s = InterarrivalSampler::new(LOCAL, "arp-req".parse().unwrap());
        let other = Ipv4Addr::new(10, 0, 0, 9);
        let got: Vec<u64> = [req(0, LOCAL), req(10, other), req(300, LOCAL)]
            .iter()
            .filter_map(|m| s.push(m))
            .map(|x| x.interarrival_us)
            .collect();
        assert_eq!(got, vec![300_000_000]);
    }

    #[test]
    fn summary_and_csv() {
        let mut s = Summary::default();
        assert_eq!(s.mean_us(), None);
        for v in [5, 1, 9] {
            s.add(v);
        }
        assert_eq!((s.count, s.min_us, s.max_us, s.mean_us()), (3, 1, 9, Some(5.0)));
        let mut out = Vec::new();
        let mut sampler = InterarrivalSampler::new(LOCAL, FlowFilter::ALL);
        sampler.push(&tcp(0, true));
        write_csv_row(&mut out, &sampler.push(&tcp(7, true)).unwrap()).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "tcp/10.0.0.1/10.0.0.2/502,7,7\n");
    }
}
