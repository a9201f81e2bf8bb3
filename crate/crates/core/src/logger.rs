//! Central collector for node status broadcasts.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::net::{Ipv4Addr, UdpSocket};
use std::time::Duration;

use crate::announce::{AnnounceError, Psk, StatusMessage, Verifier};
use crate::time::Timestamp;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Liveness {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntrusionView {
    No,
    Yes,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_id: u16,
    /// Receive time of the last valid message; `None` for roster entries
    /// that never reported.
    pub last_msg: Option<Timestamp>,
    pub last_flags: u8,
    pub liveness: Liveness,
    pub intrusion_view: IntrusionView,
}

impl fmt::Display for NodeRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = match self.liveness {
            Liveness::Up => "up",
            Liveness::Down => "down",
        };
        let intrusion = match self.intrusion_view {
            IntrusionView::No => "no",
            IntrusionView::Yes => "yes",
            IntrusionView::Unknown => "???",
        };
        write!(f, "ID: {} is {} Intrusion: {}", self.node_id, state, intrusion)
    }
}

/// Counters of rejected datagrams, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RejectCounters {
    pub bad_length: u64,
    pub bad_magic: u64,
    pub bad_version: u64,
    pub bad_hmac: u64,
    pub replayed: u64,
    pub future: u64,
}

impl RejectCounters {
    pub fn total(&self) -> u64 {
        self.bad_length + self.bad_magic + self.bad_version + self.bad_hmac + self.replayed + self.future
    }

    fn count(&mut self, e: &AnnounceError) {
        let slot = match e {
            AnnounceError::BadLength(_) => &mut self.bad_length,
            AnnounceError::BadMagic => &mut self.bad_magic,
            AnnounceError::BadVersion(_) => &mut self.bad_version,
            AnnounceError::BadHmac => &mut self.bad_hmac,
            AnnounceError::ReplayRejected { .. } => &mut self.replayed,
            AnnounceError::FutureTimestamp { .. } => &mut self.future,
        };
        *slot += 1;
    }
}

#[derive(Debug, Clone)]
pub struct Logger {
    verifier: Verifier,
    timeout: Duration,
    nodes: BTreeMap<u16, NodeRecord>,
    rejected: RejectCounters,
}

impl Logger {
    pub fn new(psk: Psk) -> Self {
        Logger {
            verifier: Verifier::new(psk),
            timeout: DEFAULT_TIMEOUT,
            nodes: BTreeMap::new(),
            rejected: RejectCounters::default(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_verifier(mut self, verifier: Verifier) -> Self {
        self.verifier = verifier;
        self
    }

    /// Pre-register nodes that are expected to report; they show as down
    /// until their first valid message.
    pub fn with_roster(mut self, ids: impl IntoIterator<Item = u16>) -> Self {
        for node_id in ids {
            self.nodes.entry(node_id).or_insert(NodeRecord {
                node_id,
                last_msg: None,
                last_flags: 0,
                liveness: Liveness::Down,
                intrusion_view: IntrusionView::Unknown,
            });
        }
        self
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn rejected(&self) -> RejectCounters {
        self.rejected
    }

    pub fn node(&self, node_id: u16) -> Option<&NodeRecord> {
        self.nodes.get(&node_id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    /// Verify and apply one datagram. Invalid input only bumps a counter.
    pub fn on_datagram(&mut self, bytes: &[u8], now: Timestamp) -> Result<NodeRecord, AnnounceError> {
        let msg: StatusMessage = match self.verifier.verify(bytes, now) {
            Ok(m) => m,
            Err(e) => {
                self.rejected.count(&e);
                return Err(e);
            }
        };
        let rec = NodeRecord {
            node_id: msg.node_id,
            last_msg: Some(now),
            last_flags: msg.flags(),
            liveness: Liveness::Up,
            intrusion_view: if msg.intrusion {
                IntrusionView::Yes
            } else {
                IntrusionView::No
            },
        };
        let slot = self.nodes.entry(msg.node_id).or_insert(rec);
        if slot.last_msg.is_none_or(|prev| prev <= now) {
            *slot = rec;
        }
        Ok(*slot)
    }

    /// Mark nodes down whose last message is at least `timeout` old.
    pub fn sweep(&mut self, now: Timestamp) -> Vec<NodeRecord> {
        let mut changed = Vec::new();
        for rec in self.nodes.values_mut() {
            if rec.liveness != Liveness::Up {
                continue;
            }
            let Some(last) = rec.last_msg else { continue };
            if now.saturating_since(last) >= self.timeout {
                rec.liveness = Liveness::Down;
                rec.intrusion_view = IntrusionView::Unknown;
                changed.push(*rec);
            }
        }
        changed
    }

    /// Earliest instant at which [`Logger::sweep`] would change something.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.nodes
            .values()
            .filter(|r| r.liveness == Liveness::Up)
            .filter_map(|r| r.last_msg)
            .min()
            .map(|t| t + self.timeout)
    }

    /// One line per node, ordered by id.
    pub fn render_status(&self) -> String {
        let mut out = String::new();
        for rec in self.nodes.values() {
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

/// Receive loop over a UDP socket. Calls `on_change` with the rendered view
/// whenever it changes. Returns when `keep_going` says so.
pub fn serve(
    logger: &mut Logger,
    port: u16,
    mut keep_going: impl FnMut() -> bool,
    mut on_change: impl FnMut(&str, Option<&NodeRecord>),
) -> io::Result<()> {
    let socket = UdpSocket::bind((Ipv4Addr::UNSPECIFIED, port))?;
    socket.set_read_timeout(Some(Duration::from_millis(250)))?;
    let mut buf = [0u8; 1500];
    let mut last_view = logger.render_status();
    while keep_going() {
        let now = Timestamp::now();
        match socket.recv_from(&mut buf) {
            Ok((n, _)) => {
                let _ = logger.on_datagram(&buf[..n], Timestamp::now());
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
        for rec in logger.sweep(now) {
            on_change(&logger.render_status(), Some(&rec));
        }
        let view = logger.render_status();
        if view != last_view {
            on_change(&view, None);
            last_view = view;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::announce::encode;
    use crate::flow::Mode;

    fn psk() -> Psk {
        Psk::new(b"plant-7".to_vec()).unwrap()
    }

    fn status(node_id: u16, at: Timestamp, intrusion: bool) -> [u8; 48] {
        encode(
            &StatusMessage {
                node_id,
                msg_time: at.as_millis(),
                intrusion,
                mode: Mode::Active,
                event_count: 0,
            },
            &psk(),
        )
    }

    fn t(s: u64) -> Timestamp {
        Timestamp::from_secs(1_600_000_000 + s)
    }

    #[test]
    fn node_table_view() {
        let mut l = Logger::new(psk());
        assert_eq!(l.render_status(), "");
        l.on_datagram(&status(1, t(0), false), t(0)).unwrap();
        l.on_datagram(&status(2, t(15), false), t(15)).unwrap();
        l.on_datagram(&status(3, t(15), true), t(15)).unwrap();
        assert_eq!(l.sweep(t(20)).len(), 1);
        let text = l.render_status();
        assert_eq!(
            text,
            "ID: 1 is down Intrusion: ???\nID: 2 is up Intrusion: no\nID: 3 is up Intrusion: yes\n"
        );
        assert_eq!(text, l.render_status());
    }

    #[test]
    fn timeout_edges_and_recovery() {
        let mut l = Logger::new(psk());
        l.on_datagram(&status(4, t(0), false), t(0)).unwrap();
        assert!(l.sweep(t(19)).is_empty());
        assert_eq!(l.next_deadline(), Some(t(20)));
        let down = l.sweep(t(20));
        assert_eq!(down[0].liveness, Liveness::Down);
        assert_eq!(down[0].intrusion_view, IntrusionView::Unknown);
        assert!(l.sweep(t(30)).is_empty());
        let rec = l.on_datagram(&status(4, t(31), false), t(31)).unwrap();
        assert_eq!(rec.liveness, Liveness::Up);
    }

    #[test]
    fn bad_input_changes_nothing() {
        let mut l = Logger::new(psk());
        let good = status(2, t(0), false);
        l.on_datagram(&good, t(0)).unwrap();
        let before = l.render_status();
        assert!(l.on_datagram(&good, t(1)).is_err());
        let mut forged = status(2, t(2), true);
        forged[20] ^= 0xff;
        assert!(l.on_datagram(&forged, t(2)).is_err());
        assert!(l.on_datagram(&[0; 10], t(2)).is_err());
        assert_eq!(l.render_status(), before);
        let r = l.rejected();
        assert_eq!((r.replayed, r.bad_hmac, r.bad_length, r.total()), (1, 1, 1, 3));
    }

    #[test]
    fn roster_starts_down() {
        let l = Logger::new(psk()).with_roster([1, 2]);
        assert_eq!(l.render_status(), "ID: 1 is down Intrusion: ???\nID: 2 is down Intrusion: ???\n");
        assert_eq!(l.next_deadline(), None);
    }

    #[test]
    fn ten_second_cadence_stays_up() {
        let mut l = Logger::new(psk());
        for i in 0..100u64 {
            let at = Timestamp::from_micros(t(i * 10).as_micros() + (i % 7) * 1_000_000);
            l.on_datagram(&status(5, at, false), at).unwrap();
            assert!(l.sweep(at + Duration::from_millis(9_999)).is_empty());
        }
    }

    #[test]
    fn nodes_are_independent() {
        let mut l = Logger::new(psk());
        l.on_datagram(&status(1, t(0), true), t(0)).unwrap();
        let one = *l.node(1).unwrap();
        l.on_datagram(&status(2, t(5), false), t(5)).unwrap();
        assert_eq!(*l.node(1).unwrap(), one);
    }
}
