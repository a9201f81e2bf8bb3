//! Connection identities and the metadata rules that sit on top of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use crate::packet::{ArpOp, Direction, MacAddr, Network, PacketMeta, TcpFlags, IPPROTO_TCP, IPPROTO_UDP};
use crate::time::Timestamp;

const MODBUS_PORT: u16 = 502;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Learning,
    Active,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Learning => "learning",
            Mode::Active => "active",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlowKind {
    Tcp,
    Udp,
    Arp,
    OtherEth,
}

impl FlowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowKind::Tcp => "tcp",
            FlowKind::Udp => "udp",
            FlowKind::Arp => "arp",
            FlowKind::OtherEth => "other",
        }
    }

    pub fn parse(s: &str) -> Option<FlowKind> {
        Some(match s {
            "tcp" => FlowKind::Tcp,
            "udp" => FlowKind::Udp,
            "arp" => FlowKind::Arp,
            "other" => FlowKind::OtherEth,
            _ => return None,
        })
    }

    /// Tcp and Udp flows are addressed by IP, the rest by MAC.
    pub fn is_ip(self) -> bool {
        matches!(self, FlowKind::Tcp | FlowKind::Udp)
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Normalized connection identity. The client's ephemeral port is erased, so
/// a reconnect from a new source port lands on the same key. Fields unused by
/// a kind are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub kind: FlowKind,
    pub peer_ip: Ipv4Addr,
    pub local_ip: Ipv4Addr,
    pub service_port: u16,
    pub peer_mac: MacAddr,
}

impl FlowKey {
    pub fn ip(kind: FlowKind, peer_ip: Ipv4Addr, local_ip: Ipv4Addr, service_port: u16) -> Self {
        FlowKey {
            kind,
            peer_ip,
            local_ip,
            service_port,
            peer_mac: MacAddr::ZERO,
        }
    }

    pub fn link(kind: FlowKind, peer_mac: MacAddr, local_ip: Ipv4Addr) -> Self {
        FlowKey {
            kind,
            peer_ip: Ipv4Addr::UNSPECIFIED,
            local_ip,
            service_port: 0,
            peer_mac,
        }
    }

    /// The peer column as rendered in text output: an IP for tcp/udp, a MAC
    /// otherwise.
    pub fn peer_string(&self) -> String {
        if self.kind.is_ip() {
            self.peer_ip.to_string()
        } else {
            self.peer_mac.to_string()
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_ip() {
            write!(f, "{}/{}/{}/{}", self.kind, self.peer_ip, self.local_ip, self.service_port)
        } else {
            write!(f, "{}/{}/{}", self.kind, self.peer_mac, self.local_ip)
        }
    }
}

fn is_server_hint(port: u16) -> bool {
    port <= 1023 || port == MODBUS_PORT
}

/// Which port of a TCP/UDP packet is the server side, absent any learned
/// orientation.
fn service_port(src_port: u16, dst_port: u16, flags: Option<TcpFlags>) -> u16 {
    if src_port == dst_port {
        return src_port;
    }
    if let Some(flags) = flags {
        if flags.contains(TcpFlags::SYN) {
            return if flags.contains(TcpFlags::ACK) { src_port } else { dst_port };
        }
    }
    match (is_server_hint(src_port), is_server_hint(dst_port)) {
        (true, false) => src_port,
        (false, true) => dst_port,
        _ => dst_port,
    }
}

fn link_peer(meta: &PacketMeta) -> MacAddr {
    match (meta.direction, &meta.network) {
        (Direction::Rx, _) => meta.src_mac,
        (Direction::Tx, Network::Arp(arp)) => {
            if arp.target_mac == MacAddr::ZERO || arp.target_mac.is_broadcast() {
                meta.dst_mac
            } else {
                arp.target_mac
            }
        }
        (Direction::Tx, _) => meta.dst_mac,
    }
}

/// Pure key derivation with no knowledge of previously learned orientation.
pub fn derive_key(meta: &PacketMeta, local_ip: Ipv4Addr) -> FlowKey {
    if let Network::Ipv4(ip) = &meta.network {
        if let (Some(l4), IPPROTO_TCP | IPPROTO_UDP) = (ip.l4, ip.protocol) {
            let kind = if ip.protocol == IPPROTO_TCP {
                FlowKind::Tcp
            } else {
                FlowKind::Udp
            };
            let peer = if ip.src_ip == local_ip {
                ip.dst_ip
            } else {
                ip.src_ip
            };
            let port = service_port(l4.src_port, l4.dst_port, l4.tcp_flags);
            return FlowKey::ip(kind, peer, local_ip, port);
        }
    }
    let kind = match meta.network {
        Network::Arp(_) => FlowKind::Arp,
        _ => FlowKind::OtherEth,
    };
    FlowKey::link(kind, link_peer(meta), local_ip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArpBinding {
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub last_seen: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlowVerdict {
    Known,
    NewFlow,
    BindingConflict,
    L2L3Mismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub verdict: FlowVerdict,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub key: FlowKey,
    /// At most one finding per verdict kind, in precedence order.
    pub findings: Vec<Finding>,
}

impl Observation {
    /// Most severe finding, `Known` if there is none.
    pub fn verdict(&self) -> FlowVerdict {
        self.findings
            .first()
            .map(|f| f.verdict)
            .unwrap_or(FlowVerdict::Known)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowRecord {
    Flow(FlowKey),
    Binding(ArpBinding),
}

#[derive(Debug, Clone)]
pub struct FlowTable {
    local_ip: Ipv4Addr,
    flows: BTreeSet<FlowKey>,
    bindings: BTreeMap<Ipv4Addr, ArpBinding>,
}

impl FlowTable {
    pub fn new(local_ip: Ipv4Addr) -> Self {
        FlowTable {
            local_ip,
            flows: BTreeSet::new(),
            bindings: BTreeMap::new(),
        }
    }

    pub fn local_ip(&self) -> Ipv4Addr {
        self.local_ip
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    pub fn contains(&self, key: &FlowKey) -> bool {
        self.flows.contains(key)
    }

    pub fn binding(&self, ip: Ipv4Addr) -> Option<&ArpBinding> {
        self.bindings.get(&ip)
    }

    pub fn insert_flow(&mut self, key: FlowKey) {
        self.flows.insert(key);
    }

    /// First binding for an address wins; later ones are ignored.
    pub fn insert_binding(&mut self, ip: Ipv4Addr, mac: MacAddr, at: Timestamp) {
        self.bindings.entry(ip).or_insert(ArpBinding {
            ip,
            mac,
            last_seen: at,
        });
    }

    /// Key for `meta`, reusing the server orientation of an already known
    /// connection between the same hosts.
    pub fn key_for(&self, meta: &PacketMeta) -> FlowKey {
        let key = derive_key(meta, self.local_ip);
        if !key.kind.is_ip() || self.flows.contains(&key) {
            return key;
        }
        if let Some(l4) = meta.l4() {
            for port in [l4.src_port, l4.dst_port] {
                let alt = FlowKey {
                    service_port: port,
                    ..key
                };
                if self.flows.contains(&alt) {
                    return alt;
                }
            }
        }
        key
    }

    pub fn observe(&mut self, meta: &PacketMeta, mode: Mode) -> Observation {
        let key = self.key_for(meta);
        match mode {
            Mode::Learning => {
                self.flows.insert(key);
                if let Some(arp) = meta.arp() {
                    if !arp.sender_ip.is_unspecified() {
                        self.insert_binding(arp.sender_ip, arp.sender_mac, meta.timestamp);
                    }
                }
                Observation {
                    key,
                    findings: Vec::new(),
                }
            }
            Mode::Active => {
                let findings = self.check(meta, &key);
                Observation { key, findings }
            }
        }
    }

    fn check(&mut self, meta: &PacketMeta, key: &FlowKey) -> Vec<Finding> {
        let mut conflict = None;
        let mut mismatch: Vec<String> = Vec::new();

        match &meta.network {
            Network::Arp(arp) => {
                if meta.src_mac != arp.sender_mac {
                    mismatch.push(format!(
                        "ethernet source {} differs from ARP sender {}",
                        meta.src_mac, arp.sender_mac
                    ));
                }
                if let Some(b) = self.bindings.get_mut(&arp.sender_ip) {
                    if b.mac == arp.sender_mac {
                        b.last_seen = meta.timestamp;
                    } else {
                        let op = match arp.op {
                            ArpOp::Request => "request",
                            ArpOp::Reply => "reply",
                        };
                        conflict = Some(format!(
                            "ARP {} binds {} to {}, learned {}",
                            op, arp.sender_ip, arp.sender_mac, b.mac
                        ));
                    }
                }
            }
            Network::Ipv4(ip) => {
                if let Some(b) = self.bindings.get(&ip.src_ip) {
                    if b.mac != meta.src_mac {
                        mismatch.push(format!(
                            "source {} sent from {}, learned {}",
                            ip.src_ip, meta.src_mac, b.mac
                        ));
                    }
                }
                if !meta.dst_mac.is_group() {
                    if let Some(b) = self.bindings.get(&ip.dst_ip) {
                        if b.mac != meta.dst_mac {
                            mismatch.push(format!(
                                "destination {} addressed to {}, learned {}",
                                ip.dst_ip, meta.dst_mac, b.mac
                            ));
                        }
                    }
                }
            }
            Network::Opaque => {}
        }

        let mut findings = Vec::new();
        if let Some(detail) = conflict {
            findings.push(Finding {
                verdict: FlowVerdict::BindingConflict,
                detail,
            });
        }
        if !mismatch.is_empty() {
            findings.push(Finding {
                verdict: FlowVerdict::L2L3Mismatch,
                detail: mismatch.join("; "),
            });
        }
        if !self.flows.contains(key) {
            findings.push(Finding {
                verdict: FlowVerdict::NewFlow,
                detail: format!("unlearned {} flow", key.kind),
            });
        }
        findings
    }

    pub fn flows(&self) -> impl Iterator<Item = &FlowKey> {
        self.flows.iter()
    }

    pub fn bindings(&self) -> impl Iterator<Item = &ArpBinding> {
        self.bindings.values()
    }

    /// Flows sorted by (kind, ip, port), then bindings sorted by ip.
    pub fn export_flows(&self) -> Vec<FlowRecord> {
        self.flows
            .iter()
            .copied()
            .map(FlowRecord::Flow)
            .chain(self.bindings.values().copied().map(FlowRecord::Binding))
            .collect()
    }
}
