//! Header metadata extraction.
//!
//! Only Ethernet II, ARP, IPv4, TCP and UDP headers are decoded. Application
//! payload is never inspected; its length is the only thing that leaks into
//! [`TransportMeta`].

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::time::Timestamp;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
pub const ETHERTYPE_QINQ: u16 = 0x88a8;

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

const ETH_HEADER_LEN: usize = 14;
const VLAN_TAG_LEN: usize = 4;
const ARP_IPV4_LEN: usize = 28;
const UDP_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xff; 6]);
    pub const ZERO: MacAddr = MacAddr([0; 6]);

    pub const fn new(a: u8, b: u8, c: u8, d: u8, e: u8, f: u8) -> Self {
        MacAddr([a, b, c, d, e, f])
    }

    pub fn octets(self) -> [u8; 6] {
        self.0
    }

    pub fn is_broadcast(self) -> bool {
        self == Self::BROADCAST
    }

    /// Group bit set: broadcast or multicast.
    pub fn is_group(self) -> bool {
        self.0[0] & 0x01 != 0
    }

    fn from_slice(b: &[u8]) -> Self {
        let mut m = [0u8; 6];
        m.copy_from_slice(&b[..6]);
        MacAddr(m)
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            m[0], m[1], m[2], m[3], m[4], m[5]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid MAC address: {0:?}")]
pub struct MacParseError(String);

impl FromStr for MacAddr {
    type Err = MacParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for slot in out.iter_mut() {
            let part = parts.next().ok_or_else(|| MacParseError(s.to_string()))?;
            if part.len() != 2 {
                return Err(MacParseError(s.to_string()));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| MacParseError(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(MacParseError(s.to_string()));
        }
        Ok(MacAddr(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Rx,
    Tx,
}

impl Direction {
    /// Best-effort direction for captures that do not record it: a frame
    /// whose IPv4 source (or ARP sender) is the monitored node was sent by it.
    pub fn infer(meta: &PacketMeta, local_ip: Ipv4Addr) -> Direction {
        let src = match &meta.network {
            Network::Ipv4(ip) => Some(ip.src_ip),
            Network::Arp(arp) => Some(arp.sender_ip),
            Network::Opaque => None,
        };
        if src == Some(local_ip) {
            Direction::Tx
        } else {
            Direction::Rx
        }
    }
}

/// TCP control bits as they appear in byte 13 of the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const URG: TcpFlags = TcpFlags(0x20);

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    /// Connection setup or teardown segment.
    pub const fn is_control(self) -> bool {
        self.0 & (Self::SYN.0 | Self::FIN.0 | Self::RST.0) != 0
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;

    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(TcpFlags, &str); 6] = [
            (TcpFlags::SYN, "SYN"),
            (TcpFlags::ACK, "ACK"),
            (TcpFlags::FIN, "FIN"),
            (TcpFlags::RST, "RST"),
            (TcpFlags::PSH, "PSH"),
            (TcpFlags::URG, "URG"),
        ];
        let mut first = true;
        for (flag, name) in NAMES {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        if first {
            f.write_str("-")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportMeta {
    pub src_port: u16,
    pub dst_port: u16,
    /// Present for TCP only.
    pub tcp_flags: Option<TcpFlags>,
    pub payload_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4Meta {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub protocol: u8,
    /// Decoded for TCP and UDP first fragments only.
    pub l4: Option<TransportMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ArpOp {
    Request,
    Reply,
}

impl ArpOp {
    pub fn opcode(self) -> u16 {
        match self {
            ArpOp::Request => 1,
            ArpOp::Reply => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArpMeta {
    pub op: ArpOp,
    pub sender_mac: MacAddr,
    pub sender_ip: Ipv4Addr,
    pub target_mac: MacAddr,
    pub target_ip: Ipv4Addr,
}

/// What sits on top of the Ethernet header. IPv4 and ARP are mutually
/// exclusive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Ipv4(Ipv4Meta),
    Arp(ArpMeta),
    Opaque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketMeta {
    pub timestamp: Timestamp,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    /// Inner ethertype when VLAN tags were present.
    pub ethertype: u16,
    pub network: Network,
    pub frame_len: usize,
    pub direction: Direction,
}

impl PacketMeta {
    pub fn l3(&self) -> Option<&Ipv4Meta> {
        match &self.network {
            Network::Ipv4(ip) => Some(ip),
            _ => None,
        }
    }

    pub fn arp(&self) -> Option<&ArpMeta> {
        match &self.network {
            Network::Arp(arp) => Some(arp),
            _ => None,
        }
    }

    pub fn l4(&self) -> Option<&TransportMeta> {
        self.l3().and_then(|ip| ip.l4.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("truncated frame: {layer} needs {needed} bytes, {available} available")]
    TruncatedFrame {
        layer: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("malformed ARP packet: {0}")]
    MalformedArp(&'static str),
    #[error("malformed IPv4 header: {0}")]
    MalformedIpv4(&'static str),
    #[error("malformed TCP header: {0}")]
    MalformedTcp(&'static str),
}

fn need(bytes: &[u8], needed: usize, layer: &'static str) -> Result<(), ParseError> {
    if bytes.len() < needed {
        Err(ParseError::TruncatedFrame {
            layer,
            needed,
            available: bytes.len(),
        })
    } else {
        Ok(())
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn ipv4_at(b: &[u8], at: usize) -> Ipv4Addr {
    Ipv4Addr::new(b[at], b[at + 1], b[at + 2], b[at + 3])
}

/// Decode one captured Ethernet II frame.
///
/// Unknown ethertypes and IP protocols are not errors; the result then only
/// carries the layers that were understood.
pub fn parse_frame(
    bytes: &[u8],
    timestamp: Timestamp,
    direction: Direction,
) -> Result<PacketMeta, ParseError> {
    need(bytes, ETH_HEADER_LEN, "ethernet")?;
    let dst_mac = MacAddr::from_slice(&bytes[0..6]);
    let src_mac = MacAddr::from_slice(&bytes[6..12]);
    let mut ethertype = be16(bytes, 12);
    let mut offset = ETH_HEADER_LEN;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        need(bytes, offset + VLAN_TAG_LEN, "vlan tag")?;
        ethertype = be16(bytes, offset + 2);
        offset += VLAN_TAG_LEN;
    }

    let body = &bytes[offset..];
    let network = match ethertype {
        ETHERTYPE_IPV4 => Network::Ipv4(parse_ipv4(body)?),
        ETHERTYPE_ARP => Network::Arp(parse_arp(body)?),
        _ => Network::Opaque,
    };

    Ok(PacketMeta {
        timestamp,
        src_mac,
        dst_mac,
        ethertype,
        network,
        frame_len: bytes.len(),
        direction,
    })
}

fn parse_arp(b: &[u8]) -> Result<ArpMeta, ParseError> {
    need(b, ARP_IPV4_LEN, "arp")?;
    let htype = be16(b, 0);
    let ptype = be16(b, 2);
    if htype != 1 || ptype != ETHERTYPE_IPV4 || b[4] != 6 || b[5] != 4 {
        return Err(ParseError::MalformedArp("not Ethernet/IPv4 ARP"));
    }
    let op = match be16(b, 6) {
        1 => ArpOp::Request,
        2 => ArpOp::Reply,
        _ => return Err(ParseError::MalformedArp("opcode is neither request nor reply")),
    };
    Ok(ArpMeta {
        op,
        sender_mac: MacAddr::from_slice(&b[8..14]),
        sender_ip: ipv4_at(b, 14),
        target_mac: MacAddr::from_slice(&b[18..24]),
        target_ip: ipv4_at(b, 24),
    })
}

fn parse_ipv4(b: &[u8]) -> Result<Ipv4Meta, ParseError> {
    need(b, 20, "ipv4")?;
    if b[0] >> 4 != 4 {
        return Err(ParseError::MalformedIpv4("version is not 4"));
    }
    let header_len = usize::from(b[0] & 0x0f) * 4;
    if header_len < 20 {
        return Err(ParseError::MalformedIpv4("header length below 20 bytes"));
    }
    need(b, header_len, "ipv4 options")?;
    let total_len = usize::from(be16(b, 2));
    if total_len < header_len {
        return Err(ParseError::MalformedIpv4("total length shorter than header"));
    }
    let protocol = b[9];
    let fragment_offset = be16(b, 6) & 0x1fff;
    let src_ip = ipv4_at(b, 12);
    let dst_ip = ipv4_at(b, 16);

    let segment = &b[header_len..];
    let ip_payload_len = total_len - header_len;
    let l4 = if fragment_offset != 0 {
        None
    } else {
        match protocol {
            IPPROTO_TCP => Some(parse_tcp(segment, ip_payload_len)?),
            IPPROTO_UDP => Some(parse_udp(segment, ip_payload_len)?),
            _ => None,
        }
    };

    Ok(Ipv4Meta {
        src_ip,
        dst_ip,
        protocol,
        l4,
    })
}

fn parse_tcp(b: &[u8], ip_payload_len: usize) -> Result<TransportMeta, ParseError> {
    need(b, 20, "tcp")?;
    let data_offset = usize::from(b[12] >> 4) * 4;
    if data_offset < 20 {
        return Err(ParseError::MalformedTcp("data offset below 20 bytes"));
    }
    need(b, data_offset, "tcp options")?;
    Ok(TransportMeta {
        src_port: be16(b, 0),
        dst_port: be16(b, 2),
        tcp_flags: Some(TcpFlags(b[13])),
        payload_len: ip_payload_len.saturating_sub(data_offset),
    })
}

fn parse_udp(b: &[u8], ip_payload_len: usize) -> Result<TransportMeta, ParseError> {
    need(b, UDP_HEADER_LEN, "udp")?;
    Ok(TransportMeta {
        src_port: be16(b, 0),
        dst_port: be16(b, 2),
        tcp_flags: None,
        payload_len: ip_payload_len.saturating_sub(UDP_HEADER_LEN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{self, TcpSegment};

    const PLC: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 50);
    const S1: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 101);
    const PLC_MAC: MacAddr = MacAddr::new(0x02, 0, 0, 0, 0, 0x32);
    const S1_MAC: MacAddr = MacAddr::new(0x02, 0, 0, 0, 0, 0x65);

    fn arp_request() -> Vec<u8> {
        builder::arp_frame(
            PLC_MAC,
            MacAddr::BROADCAST,
            &ArpMeta {
                op: ArpOp::Request,
                sender_mac: PLC_MAC,
                sender_ip: PLC,
                target_mac: MacAddr::ZERO,
                target_ip: S1,
            },
        )
    }

    #[test]
    fn arp_request_42_bytes() {
        let frame = arp_request();
        assert_eq!(frame.len(), 42);
        let meta = parse_frame(&frame, Timestamp::ZERO, Direction::Rx).unwrap();
        assert_eq!(meta.ethertype, 0x0806);
        let arp = meta.arp().unwrap();
        assert_eq!(arp.op, ArpOp::Request);
        assert_eq!(arp.sender_ip, PLC);
        assert_eq!(arp.target_ip, S1);
        assert!(meta.l3().is_none());
    }

    #[test]
    fn thirteen_bytes_is_truncated() {
        let err = parse_frame(&[0u8; 13], Timestamp::ZERO, Direction::Rx).unwrap_err();
        assert!(matches!(err, ParseError::TruncatedFrame { needed: 14, .. }));
    }

    #[test]
    fn tcp_syn_to_modbus_port() {
        let frame = builder::tcp_frame(&TcpSegment {
            src_mac: PLC_MAC,
            dst_mac: S1_MAC,
            src_ip: PLC,
            dst_ip: S1,
            src_port: 49152,
            dst_port: 502,
            seq: 1,
            ack: 0,
            flags: TcpFlags::SYN,
            ip_id: 7,
            payload: &[],
        });
        let meta = parse_frame(&frame, Timestamp::ZERO, Direction::Rx).unwrap();
        let l4 = meta.l4().unwrap();
        assert_eq!(l4.tcp_flags, Some(TcpFlags::SYN));
        assert_eq!(l4.dst_port, 502);
        assert_eq!(l4.payload_len, 0);
        assert_eq!(meta.frame_len, 54);
    }

    #[test]
    fn bad_arp_opcode() {
        let mut frame = arp_request();
        frame[14 + 7] = 3;
        let err = parse_frame(&frame, Timestamp::ZERO, Direction::Rx).unwrap_err();
        assert!(matches!(err, ParseError::MalformedArp(_)));
    }

    #[test]
    fn vlan_tag_is_skipped() {
        let plain = arp_request();
        let mut tagged = plain[..12].to_vec();
        tagged.extend_from_slice(&[0x81, 0x00, 0x00, 0x05]);
        tagged.extend_from_slice(&plain[12..]);
        let meta = parse_frame(&tagged, Timestamp::ZERO, Direction::Rx).unwrap();
        assert_eq!(meta.ethertype, ETHERTYPE_ARP);
        assert_eq!(meta.arp().unwrap().sender_ip, PLC);
    }

    #[test]
    fn ipv6_is_opaque() {
        let mut frame = vec![0u8; 60];
        frame[12] = 0x86;
        frame[13] = 0xdd;
        let meta = parse_frame(&frame, Timestamp::ZERO, Direction::Rx).unwrap();
        assert_eq!(meta.network, Network::Opaque);
        assert_eq!(meta.ethertype, 0x86dd);
    }

    #[test]
    fn truncated_tcp_header() {
        let frame = builder::tcp_frame(&TcpSegment {
            src_mac: PLC_MAC,
            dst_mac: S1_MAC,
            src_ip: PLC,
            dst_ip: S1,
            src_port: 49152,
            dst_port: 502,
            seq: 1,
            ack: 0,
            flags: TcpFlags::ACK,
            ip_id: 7,
            payload: &[1; 12],
        });
        let err = parse_frame(&frame[..14 + 20 + 10], Timestamp::ZERO, Direction::Rx).unwrap_err();
        assert!(matches!(err, ParseError::TruncatedFrame { layer: "tcp", .. }));
    }

    #[test]
    fn non_first_fragment_has_no_transport() {
        let mut frame = builder::udp_frame(
            PLC_MAC, S1_MAC, PLC, S1, 1000, 2000, &[0; 4], 1,
        );
        frame[14 + 6] = 0x00;
        frame[14 + 7] = 0x10;
        let meta = parse_frame(&frame, Timestamp::ZERO, Direction::Rx).unwrap();
        let ip = meta.l3().unwrap();
        assert_eq!(ip.protocol, IPPROTO_UDP);
        assert!(ip.l4.is_none());
    }

    #[test]
    fn mac_round_trip() {
        let m: MacAddr = "02:00:00:00:00:3a".parse().unwrap();
        assert_eq!(m.to_string(), "02:00:00:00:00:3a");
        assert!("02:00:00:00:00".parse::<MacAddr>().is_err());
        assert!("02:00:00:00:00:00:00".parse::<MacAddr>().is_err());
        assert!(MacAddr::BROADCAST.is_group());
        assert!(!PLC_MAC.is_group());
    }

    #[test]
    fn flags_render() {
        assert_eq!((TcpFlags::SYN | TcpFlags::ACK).to_string(), "SYN|ACK");
        assert_eq!(TcpFlags(0).to_string(), "-");
        assert!(TcpFlags::FIN.is_control());
        assert!(!(TcpFlags::PSH | TcpFlags::ACK).is_control());
    }
}
