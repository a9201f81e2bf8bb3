//! Authenticated node status datagrams.
//!
//! Wire layout, 48 octets, integers big-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `EIDS`                           |
//! | 4      | 1    | version `0x01`                         |
//! | 5      | 2    | node id                                |
//! | 7      | 6    | sender time, ms since the Unix epoch   |
//! | 13     | 1    | flags: bit0 intrusion, bit1 active     |
//! | 14     | 2    | events since the previous message      |
//! | 16     | 32   | HMAC-SHA-256 over octets 0..16         |

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::net::{Ipv4Addr, SocketAddrV4, UdpSocket};
use std::time::Duration;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::flow::Mode;
use crate::time::Timestamp;

pub const MAGIC: [u8; 4] = *b"EIDS";
pub const VERSION: u8 = 0x01;
pub const MESSAGE_LEN: usize = 48;
pub const SIGNED_LEN: usize = 16;
pub const DEFAULT_PORT: u16 = 47808;
pub const KEEPALIVE_PERIOD: Duration = Duration::from_secs(10);
pub const DEFAULT_FUTURE_SKEW: Duration = Duration::from_secs(120);
/// Largest representable sender time (48 bits of milliseconds).
pub const MAX_MSG_TIME: u64 = (1 << 48) - 1;

const FLAG_INTRUSION: u8 = 0x01;
const FLAG_ACTIVE: u8 = 0x02;

type HmacSha256 = Hmac<Sha256>;

/// Pre-shared key. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct Psk(Vec<u8>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("pre-shared key must not be empty")]
pub struct EmptyPsk;

impl Psk {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, EmptyPsk> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            Err(EmptyPsk)
        } else {
            Ok(Psk(bytes))
        }
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("HMAC accepts keys of any length")
    }
}

impl fmt::Debug for Psk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Psk(<{} bytes>)", self.0.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatusMessage {
    pub node_id: u16,
    /// Milliseconds since the Unix epoch, truncated to 48 bits.
    pub msg_time: u64,
    pub intrusion: bool,
    pub mode: Mode,
    pub event_count: u16,
}

impl StatusMessage {
    pub fn flags(&self) -> u8 {
        let mut f = 0;
        if self.intrusion {
            f |= FLAG_INTRUSION;
        }
        if self.mode == Mode::Active {
            f |= FLAG_ACTIVE;
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AnnounceError {
    #[error("status message must be {MESSAGE_LEN} octets, got {0}")]
    BadLength(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("HMAC verification failed")]
    BadHmac,
    #[error("replayed or stale message from node {node_id} (time {msg_time} ms, last accepted {last} ms)")]
    ReplayRejected { node_id: u16, msg_time: u64, last: u64 },
    #[error("message time {msg_time} ms is too far ahead of the local clock")]
    FutureTimestamp { msg_time: u64 },
}

pub fn encode(msg: &StatusMessage, psk: &Psk) -> [u8; MESSAGE_LEN] {
    let mut out = [0u8; MESSAGE_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4] = VERSION;
    out[5..7].copy_from_slice(&msg.node_id.to_be_bytes());
    let t = (msg.msg_time & MAX_MSG_TIME).to_be_bytes();
    out[7..13].copy_from_slice(&t[2..8]);
    out[13] = msg.flags();
    out[14..16].copy_from_slice(&msg.event_count.to_be_bytes());
    let mut mac = psk.mac();
    mac.update(&out[..SIGNED_LEN]);
    out[SIGNED_LEN..].copy_from_slice(&mac.finalize().into_bytes());
    out
}

/// Structural and HMAC checks only, no replay state.
pub fn decode(bytes: &[u8], psk: &Psk) -> Result<StatusMessage, AnnounceError> {
    if bytes.len() != MESSAGE_LEN {
        return Err(AnnounceError::BadLength(bytes.len()));
    }
    if bytes[0..4] != MAGIC {
        return Err(AnnounceError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(AnnounceError::BadVersion(bytes[4]));
    }
    let mut mac = psk.mac();
    mac.update(&bytes[..SIGNED_LEN]);
    mac.verify_slice(&bytes[SIGNED_LEN..])
        .map_err(|_| AnnounceError::BadHmac)?;
    let mut t = [0u8; 8];
    t[2..8].copy_from_slice(&bytes[7..13]);
    Ok(StatusMessage {
        node_id: u16::from_be_bytes([bytes[5], bytes[6]]),
        msg_time: u64::from_be_bytes(t),
        intrusion: bytes[13] & FLAG_INTRUSION != 0,
        mode: if bytes[13] & FLAG_ACTIVE != 0 {
            Mode::Active
        } else {
            Mode::Learning
        },
        event_count: u16::from_be_bytes([bytes[14], bytes[15]]),
    })
}

/// Last accepted sender time per node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayState {
    last: BTreeMap<u16, u64>,
}

impl ReplayState {
    pub fn last_accepted(&self, node_id: u16) -> Option<u64> {
        self.last.get(&node_id).copied()
    }
}

pub fn decode_verify(bytes: &[u8], psk: &Psk, replay: &mut ReplayState) -> Result<StatusMessage, AnnounceError> {
    let msg = decode(bytes, psk)?;
    if let Some(&last) = replay.last.get(&msg.node_id) {
        if msg.msg_time <= last {
            return Err(AnnounceError::ReplayRejected {
                node_id: msg.node_id,
                msg_time: msg.msg_time,
                last,
            });
        }
    }
    replay.last.insert(msg.node_id, msg.msg_time);
    Ok(msg)
}

/// [`decode_verify`] plus a bound on how far a sender clock may run ahead.
#[derive(Debug, Clone)]
pub struct Verifier {
    psk: Psk,
    replay: ReplayState,
    future_skew: Duration,
}

impl Verifier {
    pub fn new(psk: Psk) -> Self {
        Verifier {
            psk,
            replay: ReplayState::default(),
            future_skew: DEFAULT_FUTURE_SKEW,
        }
    }

    pub fn with_future_skew(mut self, skew: Duration) -> Self {
        self.future_skew = skew;
        self
    }

    pub fn replay_state(&self) -> &ReplayState {
        &self.replay
    }

    pub fn verify(&mut self, bytes: &[u8], now: Timestamp) -> Result<StatusMessage, AnnounceError> {
        let msg = decode(bytes, &self.psk)?;
        let horizon = (now + self.future_skew).as_millis();
        if msg.msg_time > horizon {
            return Err(AnnounceError::FutureTimestamp { msg_time: msg.msg_time });
        }
        decode_verify(bytes, &self.psk, &mut self.replay)
    }
}

/// True when a keep-alive is due. A clock that stepped backwards counts as
/// no time elapsed.
pub fn keepalive_schedule(last_sent: Option<Timestamp>, now: Timestamp, period: Duration) -> bool {
    match last_sent {
        None => true,
        Some(last) => now.saturating_since(last) >= period,
    }
}

/// Sends status messages as UDP broadcasts.
#[derive(Debug)]
pub struct Announcer {
    socket: UdpSocket,
    dest: SocketAddrV4,
    psk: Psk,
    last_sent: Option<Timestamp>,
    period: Duration,
}

impl Announcer {
    pub fn bind(port: u16, psk: Psk) -> io::Result<Self> {
        let socket = UdpSocket::bind((Ipv4Addr::UNSPECIFIED, 0))?;
        socket.set_broadcast(true)?;
        Ok(Announcer {
            socket,
            dest: SocketAddrV4::new(Ipv4Addr::BROADCAST, port),
            psk,
            last_sent: None,
            period: KEEPALIVE_PERIOD,
        })
    }

    pub fn with_destination(mut self, dest: SocketAddrV4) -> Self {
        self.dest = dest;
        self
    }

    /// Send if the keep-alive period elapsed. Returns whether it sent.
    pub fn poll(&mut self, now: Timestamp, status: impl FnOnce() -> StatusMessage) -> io::Result<bool> {
        if !keepalive_schedule(self.last_sent, now, self.period) {
            return Ok(false);
        }
        let bytes = encode(&status(), &self.psk);
        self.socket.send_to(&bytes, self.dest)?;
        self.last_sent = Some(now);
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn psk() -> Psk {
        Psk::new(b"correct horse battery staple".to_vec()).unwrap()
    }

    fn msg(node_id: u16, msg_time: u64, intrusion: bool) -> StatusMessage {
        StatusMessage {
            node_id,
            msg_time,
            intrusion,
            mode: Mode::Active,
            event_count: u16::from(intrusion),
        }
    }

    #[test]
    fn layout() {
        let m = msg(2, 1_600_000_000_000, false);
        let b = encode(&m, &psk());
        assert_eq!(b.len(), 48);
        assert_eq!(&b[0..4], b"EIDS");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..7], &[0, 2]);
        assert_eq!(&b[7..13], &1_600_000_000_000u64.to_be_bytes()[2..]);
        assert_eq!(b[13], 0b10);
        assert_eq!(encode(&msg(3, 5, true), &psk())[13], 0b11);
    }

    #[test]
    fn round_trip_and_determinism() {
        let m = msg(3, 1_600_000_000_123, true);
        assert_eq!(encode(&m, &psk()), encode(&m, &psk()));
        let mut r = ReplayState::default();
        assert_eq!(decode_verify(&encode(&m, &psk()), &psk(), &mut r), Ok(m));
        assert_eq!(r.last_accepted(3), Some(1_600_000_000_123));
    }

    #[test]
    fn replay_rejected() {
        let b = encode(&msg(2, 1000, false), &psk());
        let mut r = ReplayState::default();
        assert!(decode_verify(&b, &psk(), &mut r).is_ok());
        assert!(matches!(
            decode_verify(&b, &psk(), &mut r),
            Err(AnnounceError::ReplayRejected { .. })
        ));
    }

    #[test]
    fn flipped_flag_bit() {
        let mut b = encode(&msg(2, 1000, false), &psk());
        b[13] ^= 1;
        assert_eq!(decode(&b, &psk()), Err(AnnounceError::BadHmac));
    }

    #[test]
    fn structural_errors() {
        let b = encode(&msg(2, 1000, false), &psk());
        assert_eq!(decode(&b[..47], &psk()), Err(AnnounceError::BadLength(47)));
        let mut m = b;
        m[0] = b'X';
        assert_eq!(decode(&m, &psk()), Err(AnnounceError::BadMagic));
        let mut v = b;
        v[4] = 2;
        assert_eq!(decode(&v, &psk()), Err(AnnounceError::BadVersion(2)));
        let other = Psk::new(b"another key".to_vec()).unwrap();
        assert_eq!(decode(&b, &other), Err(AnnounceError::BadHmac));
        assert!(Psk::new(Vec::new()).is_err());
    }

    #[test]
    fn future_skew() {
        let now = Timestamp::from_secs(1_600_000_000);
        let mut v = Verifier::new(psk());
        let ahead = encode(&msg(1, now.as_millis() + 121_000, false), &psk());
        assert!(matches!(v.verify(&ahead, now), Err(AnnounceError::FutureTimestamp { .. })));
        let ok = encode(&msg(1, now.as_millis() + 119_000, false), &psk());
        assert!(v.verify(&ok, now).is_ok());
    }

    #[test]
    fn keepalive_cadence() {
        let t0 = Timestamp::from_secs(100);
        let p = KEEPALIVE_PERIOD;
        assert!(keepalive_schedule(None, t0, p));
        assert!(!keepalive_schedule(Some(t0), t0 + Duration::from_millis(9_900), p));
        assert!(keepalive_schedule(Some(t0), t0 + Duration::from_secs(10), p));
        assert!(!keepalive_schedule(Some(t0), Timestamp::from_secs(50), p));
    }

    #[test]
    fn psk_debug_hides_key() {
        assert_eq!(format!("{:?}", psk()), "Psk(<28 bytes>)");
    }

    proptest! {
        #[test]
        fn any_non_hmac_bit_flip_is_rejected(
            key in prop::collection::vec(any::<u8>(), 1..64),
            node in any::<u16>(),
            time in 0u64..MAX_MSG_TIME,
            intrusion in any::<bool>(),
        ) {
            let psk = Psk::new(key).unwrap();
            let good = encode(&msg(node, time, intrusion), &psk);
            for bit in 0..SIGNED_LEN * 8 {
                let mut b = good;
                b[bit / 8] ^= 1 << (bit % 8);
                prop_assert!(decode(&b, &psk).is_err());
            }
        }

        #[test]
        fn non_increasing_times_accept_once(start in 1u64..1_000_000, steps in prop::collection::vec(0u64..1000, 1..20)) {
            let mut r = ReplayState::default();
            let mut t = start;
            let mut accepted = 0;
            for (i, s) in steps.iter().enumerate() {
                if i > 0 {
                    t = t.saturating_sub(*s);
                }
                if decode_verify(&encode(&msg(7, t, false), &psk()), &psk(), &mut r).is_ok() {
                    accepted += 1;
                }
            }
            prop_assert_eq!(accepted, 1);
        }

        #[test]
        fn encode_decode_inverse(node in any::<u16>(), time in 0u64..=MAX_MSG_TIME, intrusion in any::<bool>(), active in any::<bool>(), count in any::<u16>()) {
            let m = StatusMessage {
                node_id: node,
                msg_time: time,
                intrusion,
                mode: if active { Mode::Active } else { Mode::Learning },
                event_count: count,
            };
            prop_assert_eq!(decode(&encode(&m, &psk()), &psk()), Ok(m));
        }
    }
}
