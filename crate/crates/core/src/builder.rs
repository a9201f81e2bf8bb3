//! Frame synthesis, the inverse of [`crate::packet::parse_frame`].
//!
//! Builders emit unpadded frames with valid IPv4, TCP and UDP checksums;
//! [`pad_to_minimum`] brings them to the 60-byte Ethernet minimum as seen on
//! the receiving side of a link.

use std::net::Ipv4Addr;

use crate::packet::{
    ArpMeta, MacAddr, Network, PacketMeta, TcpFlags, ETHERTYPE_ARP, ETHERTYPE_IPV4, IPPROTO_TCP,
    IPPROTO_UDP,
};

pub const MIN_FRAME_LEN: usize = 60;

#[derive(Debug, Clone)]
pub struct TcpSegment<'a> {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub ip_id: u16,
    pub payload: &'a [u8],
}

pub fn pad_to_minimum(mut frame: Vec<u8>) -> Vec<u8> {
    if frame.len() < MIN_FRAME_LEN {
        frame.resize(MIN_FRAME_LEN, 0);
    }
    frame
}

fn ethernet_header(out: &mut Vec<u8>, dst: MacAddr, src: MacAddr, ethertype: u16) {
    out.extend_from_slice(&dst.octets());
    out.extend_from_slice(&src.octets());
    out.extend_from_slice(&ethertype.to_be_bytes());
}

fn ones_complement_sum(mut acc: u32, bytes: &[u8]) -> u32 {
    let mut chunks = bytes.chunks_exact(2);
    for c in &mut chunks {
        acc += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        acc += u32::from(*last) << 8;
    }
    acc
}

fn fold(mut acc: u32) -> u16 {
    while acc > 0xffff {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    !(acc as u16)
}

fn ipv4_header(
    out: &mut Vec<u8>,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    protocol: u8,
    payload_len: usize,
    ip_id: u16,
) {
    let start = out.len();
    let total = (20 + payload_len) as u16;
    out.extend_from_slice(&[0x45, 0x00]);
    out.extend_from_slice(&total.to_be_bytes());
    out.extend_from_slice(&ip_id.to_be_bytes());
    out.extend_from_slice(&[0x40, 0x00, 64, protocol, 0, 0]);
    out.extend_from_slice(&src.octets());
    out.extend_from_slice(&dst.octets());
    let csum = fold(ones_complement_sum(0, &out[start..start + 20]));
    out[start + 10..start + 12].copy_from_slice(&csum.to_be_bytes());
}

fn pseudo_header_sum(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, len: usize) -> u32 {
    let mut acc = ones_complement_sum(0, &src.octets());
    acc = ones_complement_sum(acc, &dst.octets());
    acc += u32::from(protocol);
    acc + len as u32
}

pub fn tcp_frame(seg: &TcpSegment<'_>) -> Vec<u8> {
    let mut out = Vec::with_capacity(54 + seg.payload.len());
    ethernet_header(&mut out, seg.dst_mac, seg.src_mac, ETHERTYPE_IPV4);
    let tcp_len = 20 + seg.payload.len();
    ipv4_header(&mut out, seg.src_ip, seg.dst_ip, IPPROTO_TCP, tcp_len, seg.ip_id);
    let start = out.len();
    out.extend_from_slice(&seg.src_port.to_be_bytes());
    out.extend_from_slice(&seg.dst_port.to_be_bytes());
    out.extend_from_slice(&seg.seq.to_be_bytes());
    out.extend_from_slice(&seg.ack.to_be_bytes());
    out.extend_from_slice(&[0x50, seg.flags.bits()]);
    out.extend_from_slice(&8192u16.to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    out.extend_from_slice(seg.payload);
    let acc = pseudo_header_sum(seg.src_ip, seg.dst_ip, IPPROTO_TCP, tcp_len);
    let csum = fold(ones_complement_sum(acc, &out[start..]));
    out[start + 16..start + 18].copy_from_slice(&csum.to_be_bytes());
    out
}

#[allow(clippy::too_many_arguments)]
pub fn udp_frame(
    src_mac: MacAddr,
    dst_mac: MacAddr,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    payload: &[u8],
    ip_id: u16,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(42 + payload.len());
    ethernet_header(&mut out, dst_mac, src_mac, ETHERTYPE_IPV4);
    let udp_len = 8 + payload.len();
    ipv4_header(&mut out, src_ip, dst_ip, IPPROTO_UDP, udp_len, ip_id);
    let start = out.len();
    out.extend_from_slice(&src_port.to_be_bytes());
    out.extend_from_slice(&dst_port.to_be_bytes());
    out.extend_from_slice(&(udp_len as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(payload);
    let acc = pseudo_header_sum(src_ip, dst_ip, IPPROTO_UDP, udp_len);
    let csum = match fold(ones_complement_sum(acc, &out[start..])) {
        0 => 0xffff,
        c => c,
    };
    out[start + 6..start + 8].copy_from_slice(&csum.to_be_bytes());
    out
}

pub fn arp_frame(src_mac: MacAddr, dst_mac: MacAddr, arp: &ArpMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(42);
    ethernet_header(&mut out, dst_mac, src_mac, ETHERTYPE_ARP);
    out.extend_from_slice(&[0x00, 0x01, 0x08, 0x00, 6, 4]);
    out.extend_from_slice(&arp.op.opcode().to_be_bytes());
    out.extend_from_slice(&arp.sender_mac.octets());
    out.extend_from_slice(&arp.sender_ip.octets());
    out.extend_from_slice(&arp.target_mac.octets());
    out.extend_from_slice(&arp.target_ip.octets());
    out
}

/// Build a frame whose parsed metadata equals `meta`. Payload bytes are
/// zero; TCP sequence numbers are zero. `frame_len` is taken from the
/// produced bytes, so callers should compare against the re-parsed value.
pub fn synthesize(meta: &PacketMeta) -> Vec<u8> {
    match &meta.network {
        Network::Arp(arp) => arp_frame(meta.src_mac, meta.dst_mac, arp),
        Network::Ipv4(ip) => match (ip.protocol, ip.l4) {
            (IPPROTO_TCP, Some(l4)) => {
                let payload = vec![0u8; l4.payload_len];
                tcp_frame(&TcpSegment {
                    src_mac: meta.src_mac,
                    dst_mac: meta.dst_mac,
                    src_ip: ip.src_ip,
                    dst_ip: ip.dst_ip,
                    src_port: l4.src_port,
                    dst_port: l4.dst_port,
                    seq: 0,
                    ack: 0,
                    flags: l4.tcp_flags.unwrap_or_default(),
                    ip_id: 0,
                    payload: &payload,
                })
            }
            (IPPROTO_UDP, Some(l4)) => {
                let payload = vec![0u8; l4.payload_len];
                udp_frame(
                    meta.src_mac,
                    meta.dst_mac,
                    ip.src_ip,
                    ip.dst_ip,
                    l4.src_port,
                    l4.dst_port,
                    &payload,
                    0,
                )
            }
            (protocol, _) => {
                let mut out = Vec::with_capacity(34);
                ethernet_header(&mut out, meta.dst_mac, meta.src_mac, ETHERTYPE_IPV4);
                ipv4_header(&mut out, ip.src_ip, ip.dst_ip, protocol, 0, 0);
                out
            }
        },
        Network::Opaque => {
            let mut out = Vec::with_capacity(MIN_FRAME_LEN);
            ethernet_header(&mut out, meta.dst_mac, meta.src_mac, meta.ethertype);
            pad_to_minimum(out)
        }
    }
}
