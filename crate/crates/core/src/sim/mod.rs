//! Deterministic discrete-event simulation of a small Modbus/TCP plant.
//!
//! Time is integer microseconds. Every device draws from its own seeded
//! ChaCha stream, and attack injectors use separate streams, so adding an
//! attack never perturbs the randomness of unrelated benign traffic.

mod config;
mod scenario;
mod topology;
mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::announce::{self, Psk, StatusMessage};
use crate::builder::{self, TcpSegment};
use crate::flow::Mode;
use crate::packet::{ArpMeta, ArpOp, MacAddr, TcpFlags};
use crate::time::Timestamp;

pub use config::{format_duration, parse_config, parse_duration, parse_scenario};
pub use scenario::{AttackScenario, ScenarioKind};
pub use topology::{Device, DeviceId, Role, Topology};
pub use trace::{FrameTrace, SimFrame};

pub const MODBUS_PORT: u16 = 502;
/// Simulated clocks start here (2020-09-13T12:26:40Z).
pub const DEFAULT_EPOCH: Timestamp = Timestamp::from_secs(1_600_000_000);
const MAX_DEVICES: usize = 64;
const STACK_TURNAROUND: Duration = Duration::from_micros(20);
const CLIENT_ACK_DELAY: Duration = Duration::from_micros(50);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error("scenarios {first} and {second} target {target} during overlapping intervals")]
    ScenarioConflict {
        first: String,
        second: String,
        target: String,
    },
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::ConfigInvalid(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficProfile {
    pub poll_period: Duration,
    /// Uniform server response time.
    pub response_delay: (Duration, Duration),
    /// Relative poll-period jitter, uniform in `±jitter`.
    pub jitter: f64,
    pub plc_timeout: Duration,
    /// ARP cache lifetimes are uniform in `mean ± spread`.
    pub arp_expiry_mean: Duration,
    pub arp_expiry_spread: Duration,
    pub arp_reply_delay: (Duration, Duration),
    pub keepalive_period: Duration,
    pub keepalive_jitter: Duration,
    /// Status broadcasts report active mode after this much time.
    pub learning: Duration,
    /// Flood rate at which the victim stops sending anything.
    pub saturation_rate: u32,
    pub psk: Psk,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        TrafficProfile {
            poll_period: Duration::from_millis(100),
            response_delay: (Duration::from_millis(1), Duration::from_millis(5)),
            jitter: 0.02,
            plc_timeout: Duration::from_millis(1000),
            arp_expiry_mean: Duration::from_secs(270),
            arp_expiry_spread: Duration::from_secs(90),
            arp_reply_delay: (Duration::from_micros(100), Duration::from_micros(500)),
            keepalive_period: announce::KEEPALIVE_PERIOD,
            keepalive_jitter: Duration::from_millis(2),
            learning: Duration::from_secs(600),
            saturation_rate: 500,
            psk: Psk::new(b"eids-sim".to_vec()).expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub topology: Topology,
    pub profile: TrafficProfile,
    pub scenarios: Vec<AttackScenario>,
    pub duration: Duration,
    pub seed: u64,
    pub epoch: Timestamp,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            topology: Topology::testbed(),
            profile: TrafficProfile::default(),
            scenarios: Vec::new(),
            duration: Duration::from_secs(60),
            seed: 1,
            epoch: DEFAULT_EPOCH,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let p = &self.profile;
        if self.duration.is_zero() {
            return Err(invalid("duration must be positive"));
        }
        for (name, d) in [
            ("poll_period", p.poll_period),
            ("plc_timeout", p.plc_timeout),
            ("arp_expiry_mean", p.arp_expiry_mean),
            ("keepalive_period", p.keepalive_period),
            ("learning", p.learning),
        ] {
            if d.is_zero() {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if p.response_delay.0.is_zero() || p.response_delay.0 > p.response_delay.1 {
            return Err(invalid("response_delay must be a positive range lo..hi"));
        }
        if p.response_delay.1 >= p.poll_period {
            return Err(invalid("response_delay must stay below poll_period"));
        }
        if p.arp_reply_delay.0.is_zero() || p.arp_reply_delay.0 > p.arp_reply_delay.1 {
            return Err(invalid("arp_reply_delay must be a positive range lo..hi"));
        }
        if !(0.0..0.5).contains(&p.jitter) {
            return Err(invalid("jitter must lie in [0, 0.5)"));
        }
        if p.arp_expiry_spread >= p.arp_expiry_mean {
            return Err(invalid("arp_expiry_spread must be below arp_expiry_mean"));
        }
        if self.topology.len() > MAX_DEVICES - self.scenarios.len() {
            return Err(invalid(format!("at most {MAX_DEVICES} devices including attackers")));
        }
        if self.topology.first_with_role(Role::Plc).is_none() {
            return Err(invalid("topology has no PLC"));
        }
        for s in &self.scenarios {
            if s.start >= self.duration {
                return Err(invalid(format!("scenario {s} starts after the end of the run")));
            }
            if s.has_target() && self.topology.by_name(&s.target).is_none() {
                return Err(invalid(format!("scenario {s}: unknown target {}", s.target)));
            }
            if s.kind == ScenarioKind::DosFlood && s.rate == 0 {
                return Err(invalid("flood rate must be positive"));
            }
            if s.period.is_zero() {
                return Err(invalid("attacker period must be positive"));
            }
            if s.duration.is_some_and(|d| d.is_zero()) {
                return Err(invalid(format!("scenario {s}: duration must be positive")));
            }
        }
        for (i, a) in self.scenarios.iter().enumerate() {
            for b in &self.scenarios[i + 1..] {
                if !a.has_target() || !b.has_target() || !a.target.eq_ignore_ascii_case(&b.target) {
                    continue;
                }
                let (a0, a1) = a.interval(self.duration);
                let (b0, b1) = b.interval(self.duration);
                if a0 < b1 && b0 < a1 {
                    return Err(SimError::ScenarioConflict {
                        first: a.to_string(),
                        second: b.to_string(),
                        target: a.target.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Topology including one attacker host per scenario that needs one.
    pub fn effective_topology(&self) -> Topology {
        let mut t = self.topology.clone();
        for s in &self.scenarios {
            if needs_attacker(s.kind) {
                t.add_attacker();
            }
        }
        t
    }
}

fn needs_attacker(kind: ScenarioKind) -> bool {
    !matches!(
        kind,
        ScenarioKind::NodeRemoved | ScenarioKind::PassiveSniff | ScenarioKind::CaptureNode
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Request {
    ReadInputs,
    ReadHolding,
    WriteRegister,
}

#[derive(Debug, Clone)]
struct Session {
    client: DeviceId,
    server: DeviceId,
    client_port: u16,
    period: Duration,
    request: Request,
    polls_left: Option<u32>,
    stop: Option<Timestamp>,
    client_seq: u32,
    server_seq: u32,
    tx_id: u16,
}

#[derive(Debug, Clone, Copy)]
struct CacheEntry {
    ready_at: Timestamp,
    expires: Timestamp,
}

#[derive(Debug)]
enum Ev {
    Emit { src: DeviceId, bytes: Vec<u8> },
    Open(usize),
    SynAt(usize),
    SynAck(usize),
    Ack(usize),
    Poll(usize),
    Respond(usize),
    FinAt(usize),
    LastAck(usize),
    Keepalive(DeviceId),
    Garp(usize),
    Forge(usize),
    Flood(usize),
    Probe(usize),
}

#[derive(Debug)]
struct Scheduled {
    at: Timestamp,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Per-scenario runtime state.
#[derive(Debug, Clone)]
struct Attack {
    scenario: AttackScenario,
    attacker: Option<DeviceId>,
    target: Option<DeviceId>,
    end: Timestamp,
}

struct Sim<'a, F: FnMut(SimFrame)> {
    cfg: &'a SimConfig,
    topo: Topology,
    rngs: Vec<ChaCha8Rng>,
    attack_rngs: Vec<ChaCha8Rng>,
    caches: Vec<BTreeMap<Ipv4Addr, CacheEntry>>,
    ip_ids: Vec<u16>,
    sessions: Vec<Session>,
    attacks: Vec<Attack>,
    removed: Vec<Option<Timestamp>>,
    mute: Vec<Vec<(Timestamp, Timestamp)>>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    end: Timestamp,
    sink: F,
}

fn uniform(rng: &mut ChaCha8Rng, lo: Duration, hi: Duration) -> Duration {
    let (lo, hi) = (lo.as_micros() as u64, hi.as_micros() as u64);
    Duration::from_micros(if lo >= hi { lo } else { rng.gen_range(lo..=hi) })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<'a, F: FnMut(SimFrame)> Sim<'a, F> {
    fn new(cfg: &'a SimConfig, sink: F) -> Self {
        let topo = cfg.effective_topology();
        let n = topo.len();
        Sim {
            cfg,
            rngs: (0..n as u64).map(|i| stream(cfg.seed, i)).collect(),
            attack_rngs: (0..cfg.scenarios.len() as u64)
                .map(|i| stream(cfg.seed, 1_000 + i))
                .collect(),
            caches: vec![BTreeMap::new(); n],
            ip_ids: vec![0; n],
            sessions: Vec::new(),
            attacks: Vec::new(),
            removed: vec![None; n],
            mute: vec![Vec::new(); n],
            heap: BinaryHeap::new(),
            seq: 0,
            end: cfg.epoch + cfg.duration,
            topo,
            sink,
        }
    }

    fn schedule(&mut self, at: Timestamp, ev: Ev) {
        if at >= self.end {
            return;
        }
        self.seq += 1;
        self.heap.push(Scheduled { at, seq: self.seq, ev });
    }

    fn alive(&self, dev: DeviceId, at: Timestamp) -> bool {
        if self.removed[dev].is_some_and(|r| at >= r) {
            return false;
        }
        !self.mute[dev].iter().any(|&(a, b)| a <= at && at < b)
    }

    fn next_ip_id(&mut self, dev: DeviceId) -> u16 {
        self.ip_ids[dev] = self.ip_ids[dev].wrapping_add(1);
        self.ip_ids[dev]
    }

    fn jittered(&mut self, dev: DeviceId, period: Duration) -> Duration {
        let j = self.cfg.profile.jitter;
        let f = if j > 0.0 {
            self.rngs[dev].gen_range(-j..=j)
        } else {
            0.0
        };
        Duration::from_micros((period.as_micros() as f64 * (1.0 + f)).round().max(1.0) as u64)
    }

    fn emit(&mut self, at: Timestamp, src: DeviceId, bytes: Vec<u8>) {
        self.schedule(at, Ev::Emit { src, bytes });
    }

    fn deliver(&mut self, at: Timestamp, src: DeviceId, bytes: Vec<u8>) {
        if !self.alive(src, at) {
            return;
        }
        let mut dst = [0u8; 6];
        dst.copy_from_slice(&bytes[0..6]);
        let dst = MacAddr(dst);
        let mut receivers = 0u64;
        for (i, d) in self.topo.devices().iter().enumerate() {
            if i == src || self.removed[i].is_some_and(|r| at >= r) {
                continue;
            }
            if dst.is_group() || d.mac == dst {
                receivers |= 1 << i;
            }
        }
        (self.sink)(SimFrame {
            time: at,
            src,
            receivers,
            bytes: builder::pad_to_minimum(bytes),
        });
    }

    fn arp_request(&mut self, src: DeviceId, target_ip: Ipv4Addr) -> Vec<u8> {
        let d = self.topo.device(src);
        builder::arp_frame(
            d.mac,
            MacAddr::BROADCAST,
            &ArpMeta {
                op: ArpOp::Request,
                sender_mac: d.mac,
                sender_ip: d.ip,
                target_mac: MacAddr::ZERO,
                target_ip,
            },
        )
    }

    /// Make sure `src` can address `dst_ip`; returns when it can send.
    fn resolve(&mut self, now: Timestamp, src: DeviceId, dst_ip: Ipv4Addr) -> Option<Timestamp> {
        if let Some(e) = self.caches[src].get(&dst_ip) {
            if e.expires > now {
                return Some(now.max(e.ready_at));
            }
        }
        let req = self.arp_request(src, dst_ip);
        self.emit(now, src, req);
        let dst = self.topo.by_ip(dst_ip)?;
        if !self.alive(dst, now) {
            return None;
        }
        let (lo, hi) = self.cfg.profile.arp_reply_delay;
        let reply_at = now + uniform(&mut self.rngs[dst], lo, hi);
        let (s, d) = (self.topo.device(src).clone(), self.topo.device(dst).clone());
        let reply = builder::arp_frame(
            d.mac,
            s.mac,
            &ArpMeta {
                op: ArpOp::Reply,
                sender_mac: d.mac,
                sender_ip: d.ip,
                target_mac: s.mac,
                target_ip: s.ip,
            },
        );
        self.emit(reply_at, dst, reply);
        let p = &self.cfg.profile;
        let (lo, hi) = (p.arp_expiry_mean - p.arp_expiry_spread, p.arp_expiry_mean + p.arp_expiry_spread);
        let lifetime = uniform(&mut self.rngs[src], lo, hi);
        let ready_at = reply_at + STACK_TURNAROUND;
        self.caches[src].insert(
            dst_ip,
            CacheEntry {
                ready_at,
                expires: reply_at + lifetime,
            },
        );
        Some(ready_at)
    }

    /// One TCP segment of session `s`; returns its send time.
    fn segment(&mut self, now: Timestamp, s: usize, from_client: bool, flags: TcpFlags, payload: &[u8]) -> Option<Timestamp> {
        let sess = self.sessions[s].clone();
        let (src, dst) = if from_client {
            (sess.client, sess.server)
        } else {
            (sess.server, sess.client)
        };
        let dst_ip = self.topo.device(dst).ip;
        let at = self.resolve(now, src, dst_ip)?;
        let (sport, dport, seq, ack) = if from_client {
            (sess.client_port, MODBUS_PORT, sess.client_seq, sess.server_seq)
        } else {
            (MODBUS_PORT, sess.client_port, sess.server_seq, sess.client_seq)
        };
        let ip_id = self.next_ip_id(src);
        let (s_dev, d_dev) = (self.topo.device(src), self.topo.device(dst));
        let frame = builder::tcp_frame(&TcpSegment {
            src_mac: s_dev.mac,
            dst_mac: d_dev.mac,
            src_ip: s_dev.ip,
            dst_ip: d_dev.ip,
            src_port: sport,
            dst_port: dport,
            seq,
            ack: if flags.contains(TcpFlags::ACK) { ack } else { 0 },
            flags,
            ip_id,
            payload,
        });
        let advance = payload.len() as u32 + u32::from(flags.contains(TcpFlags::SYN) || flags.contains(TcpFlags::FIN));
        let sess = &mut self.sessions[s];
        if from_client {
            sess.client_seq = sess.client_seq.wrapping_add(advance);
        } else {
            sess.server_seq = sess.server_seq.wrapping_add(advance);
        }
        self.emit(at, src, frame);
        Some(at)
    }

    fn add_session(&mut self, sess: Session, open_at: Timestamp) {
        self.sessions.push(sess);
        let idx = self.sessions.len() - 1;
        self.schedule(open_at, Ev::Open(idx));
    }

    fn new_session(&mut self, client: DeviceId, server: DeviceId, client_port: u16, period: Duration, request: Request) -> Session {
        let isn_c = self.rngs[client].gen::<u32>();
        let isn_s = self.rngs[server].gen::<u32>();
        Session {
            client,
            server,
            client_port,
            period,
            request,
            polls_left: None,
            stop: None,
            client_seq: isn_c,
            server_seq: isn_s,
            tx_id: 0,
        }
    }

    fn setup(&mut self) {
        let epoch = self.cfg.epoch;
        let p = self.cfg.profile.clone();
        let plc = self.topo.first_with_role(Role::Plc).expect("validated");

        let field: Vec<DeviceId> = self.topo.field_devices().collect();
        for (i, &dev) in field.iter().enumerate() {
            let request = if self.topo.device(dev).role == Role::Actor {
                Request::WriteRegister
            } else {
                Request::ReadInputs
            };
            let sess = self.new_session(plc, dev, 49152 + i as u16, p.poll_period, request);
            let offset = uniform(&mut self.rngs[plc], Duration::ZERO, p.poll_period);
            self.add_session(sess, epoch + offset);
        }
        for (port, role) in [(50000u16, Role::Hmi), (50001, Role::Cloud)] {
            if let Some(client) = self.topo.first_with_role(role) {
                let sess = self.new_session(client, plc, port, p.poll_period, Request::ReadHolding);
                let offset = uniform(&mut self.rngs[client], Duration::ZERO, p.poll_period);
                self.add_session(sess, epoch + offset);
            }
        }
        let edges: Vec<DeviceId> = self.topo.edge_nodes().collect();
        for dev in edges {
            let offset = uniform(&mut self.rngs[dev], Duration::ZERO, p.keepalive_period);
            self.schedule(epoch + offset, Ev::Keepalive(dev));
        }

        let mut next_attacker = self.cfg.topology.len();
        for sc in &self.cfg.scenarios {
            let attacker = if needs_attacker(sc.kind) {
                next_attacker += 1;
                Some(next_attacker - 1)
            } else {
                None
            };
            let (_, end) = sc.interval(self.cfg.duration);
            self.attacks.push(Attack {
                scenario: sc.clone(),
                attacker,
                target: if sc.has_target() {
                    self.topo.by_name(&sc.target)
                } else {
                    None
                },
                end: epoch + end,
            });
        }
        for i in 0..self.attacks.len() {
            self.setup_attack(i);
        }
    }

    fn setup_attack(&mut self, i: usize) {
        let a = self.attacks[i].clone();
        let start = self.cfg.epoch + a.scenario.start;
        let target = a.target;
        match a.scenario.kind {
            ScenarioKind::NodeRemoved => {
                let t = target.expect("validated");
                self.removed[t] = Some(self.removed[t].map_or(start, |r| r.min(start)));
            }
            ScenarioKind::ActiveSniff => self.schedule(start, Ev::Garp(i)),
            ScenarioKind::Spoof => {
                self.schedule(start, Ev::Probe(i));
                self.schedule(start + Duration::from_secs(5), Ev::Forge(i));
            }
            ScenarioKind::Inject => {
                let attacker = a.attacker.expect("attacker");
                let port = self.attack_rngs[i].gen_range(40000..45000);
                let mut sess = self.new_session(attacker, target.expect("validated"), port, self.cfg.profile.poll_period, Request::WriteRegister);
                sess.polls_left = Some(1);
                self.add_session(sess, start);
            }
            ScenarioKind::DosFlood => {
                let t = target.expect("validated");
                if a.scenario.rate >= self.cfg.profile.saturation_rate {
                    self.mute[t].push((start, a.end));
                }
                self.schedule(start, Ev::Flood(i));
            }
            ScenarioKind::PassiveSniff => {}
            ScenarioKind::LearningAttack => {
                let attacker = a.attacker.expect("attacker");
                let port = self.attack_rngs[i].gen_range(40000..45000);
                let mut sess = self.new_session(attacker, target.expect("validated"), port, a.scenario.period, Request::ReadInputs);
                if a.scenario.duration.is_some() {
                    sess.stop = Some(a.end);
                }
                self.add_session(sess, start);
            }
            ScenarioKind::CaptureNode => {
                let t = target.expect("validated");
                let peers: Vec<DeviceId> = self.topo.field_devices().filter(|&d| d != t).collect();
                for (k, peer) in peers.into_iter().enumerate() {
                    let mut sess = self.new_session(t, peer, 45000 + k as u16, self.cfg.profile.poll_period, Request::ReadInputs);
                    sess.polls_left = Some(1);
                    self.add_session(sess, start + Duration::from_millis(100 * k as u64));
                }
            }
        }
    }

    fn modbus_request(&mut self, s: usize) -> Vec<u8> {
        let sess = &mut self.sessions[s];
        sess.tx_id = sess.tx_id.wrapping_add(1);
        let tx = sess.tx_id.to_be_bytes();
        let pdu: &[u8] = match sess.request {
            Request::ReadInputs => &[0x02, 0x00, 0x00, 0x00, 0x08],
            Request::ReadHolding => &[0x03, 0x00, 0x00, 0x00, 0x0a],
            Request::WriteRegister => &[0x06, 0x00, 0x01, 0x00, 0x2a],
        };
        mbap(tx, pdu)
    }

    fn modbus_response(&self, s: usize) -> Vec<u8> {
        let sess = &self.sessions[s];
        let tx = sess.tx_id.to_be_bytes();
        match sess.request {
            Request::ReadInputs => mbap(tx, &[0x02, 0x01, 0x5a]),
            Request::ReadHolding => {
                let mut pdu = vec![0x03, 20];
                pdu.extend_from_slice(&[0; 20]);
                mbap(tx, &pdu)
            }
            Request::WriteRegister => mbap(tx, &[0x06, 0x00, 0x01, 0x00, 0x2a]),
        }
    }

    fn response_delay(&mut self, dev: DeviceId) -> Duration {
        let (lo, hi) = self.cfg.profile.response_delay;
        uniform(&mut self.rngs[dev], lo, hi)
    }

    fn handle(&mut self, now: Timestamp, ev: Ev) {
        let timeout = self.cfg.profile.plc_timeout;
        match ev {
            Ev::Emit { src, bytes } => self.deliver(now, src, bytes),
            Ev::Open(s) => {
                let client = self.sessions[s].client;
                if !self.alive(client, now) {
                    return;
                }
                match self.segment(now, s, true, TcpFlags::SYN, &[]) {
                    Some(at) => self.schedule(at, Ev::SynAt(s)),
                    None => self.schedule(now + timeout, Ev::Open(s)),
                }
            }
            Ev::SynAt(s) => {
                let server = self.sessions[s].server;
                if self.alive(server, now) {
                    let d = self.response_delay(server);
                    self.schedule(now + d, Ev::SynAck(s));
                } else {
                    self.schedule(now + timeout, Ev::Open(s));
                }
            }
            Ev::SynAck(s) => match self.segment(now, s, false, TcpFlags::SYN | TcpFlags::ACK, &[]) {
                Some(at) => self.schedule(at + CLIENT_ACK_DELAY, Ev::Ack(s)),
                None => self.schedule(now + timeout, Ev::Open(s)),
            },
            Ev::Ack(s) => {
                if let Some(at) = self.segment(now, s, true, TcpFlags::ACK, &[]) {
                    let period = self.sessions[s].period;
                    let client = self.sessions[s].client;
                    let next = self.jittered(client, period);
                    self.schedule(at + next, Ev::Poll(s));
                }
            }
            Ev::Poll(s) => self.poll(now, s),
            Ev::Respond(s) => {
                let server = self.sessions[s].server;
                if self.alive(server, now) {
                    let body = self.modbus_response(s);
                    self.segment(now, s, false, TcpFlags::PSH | TcpFlags::ACK, &body);
                }
            }
            Ev::FinAt(s) => {
                let server = self.sessions[s].server;
                if self.alive(server, now) {
                    let d = self.response_delay(server);
                    if let Some(at) = self.segment(now + d, s, false, TcpFlags::FIN | TcpFlags::ACK, &[]) {
                        self.schedule(at + CLIENT_ACK_DELAY, Ev::LastAck(s));
                    }
                }
            }
            Ev::LastAck(s) => {
                self.segment(now, s, true, TcpFlags::ACK, &[]);
            }
            Ev::Keepalive(dev) => self.keepalive(now, dev),
            Ev::Garp(i) => {
                let a = self.attacks[i].clone();
                let attacker = self.topo.device(a.attacker.expect("attacker")).clone();
                let victim_ip = self.topo.device(a.target.expect("target")).ip;
                let frame = builder::arp_frame(
                    attacker.mac,
                    MacAddr::BROADCAST,
                    &ArpMeta {
                        op: ArpOp::Reply,
                        sender_mac: attacker.mac,
                        sender_ip: victim_ip,
                        target_mac: MacAddr::BROADCAST,
                        target_ip: victim_ip,
                    },
                );
                self.emit(now, a.attacker.expect("attacker"), frame);
                if now + Duration::from_secs(1) < a.end {
                    self.schedule(now + Duration::from_secs(1), Ev::Garp(i));
                }
            }
            Ev::Probe(i) => {
                let attacker = self.attacks[i].attacker.expect("attacker");
                if let Some(plc) = self.topo.first_with_role(Role::Plc) {
                    let ip = self.topo.device(plc).ip;
                    self.resolve(now, attacker, ip);
                }
            }
            Ev::Forge(i) => {
                let a = self.attacks[i].clone();
                let attacker = self.topo.device(a.attacker.expect("attacker")).clone();
                let victim = self.topo.device(a.target.expect("target")).clone();
                // Without the key the best guess is an arbitrary one.
                let guess = Psk::new(b"guessed-key".to_vec()).expect("non-empty");
                let msg = StatusMessage {
                    node_id: victim.node_id.unwrap_or(0),
                    msg_time: now.as_millis(),
                    intrusion: false,
                    mode: Mode::Active,
                    event_count: 0,
                };
                let payload = announce::encode(&msg, &guess);
                let ip_id = self.next_ip_id(a.attacker.expect("attacker"));
                let frame = builder::udp_frame(
                    attacker.mac,
                    MacAddr::BROADCAST,
                    victim.ip,
                    Ipv4Addr::BROADCAST,
                    announce::DEFAULT_PORT,
                    announce::DEFAULT_PORT,
                    &payload,
                    ip_id,
                );
                self.emit(now, a.attacker.expect("attacker"), frame);
                let next = now + self.cfg.profile.keepalive_period;
                if next < a.end {
                    self.schedule(next, Ev::Forge(i));
                }
            }
            Ev::Flood(i) => {
                let a = self.attacks[i].clone();
                let attacker_id = a.attacker.expect("attacker");
                let attacker = self.topo.device(attacker_id).clone();
                let victim_id = a.target.expect("target");
                let victim = self.topo.device(victim_id).clone();
                let plc = self.topo.first_with_role(Role::Plc).expect("validated");
                let spoofed_ip = self.topo.device(plc).ip;
                let spoofed_port = self
                    .sessions
                    .iter()
                    .find(|s| s.client == plc && s.server == victim_id)
                    .map_or(49152, |s| s.client_port);
                let seq = self.attack_rngs[i].gen::<u32>();
                let ip_id = self.next_ip_id(attacker_id);
                let frame = builder::tcp_frame(&TcpSegment {
                    src_mac: attacker.mac,
                    dst_mac: victim.mac,
                    src_ip: spoofed_ip,
                    dst_ip: victim.ip,
                    src_port: spoofed_port,
                    dst_port: MODBUS_PORT,
                    seq,
                    ack: 0,
                    flags: TcpFlags::PSH | TcpFlags::ACK,
                    ip_id,
                    payload: &mbap([0, 1], &[0x02, 0x00, 0x00, 0x00, 0x08]),
                });
                self.emit(now, attacker_id, frame);
                let gap = Duration::from_micros((1_000_000 / u64::from(a.scenario.rate)).max(1));
                if now + gap < a.end {
                    self.schedule(now + gap, Ev::Flood(i));
                }
            }
        }
    }

    fn poll(&mut self, now: Timestamp, s: usize) {
        let sess = self.sessions[s].clone();
        if !self.alive(sess.client, now) {
            return;
        }
        let done = sess.polls_left == Some(0) || sess.stop.is_some_and(|t| now >= t);
        if done {
            if let Some(at) = self.segment(now, s, true, TcpFlags::FIN | TcpFlags::ACK, &[]) {
                self.schedule(at, Ev::FinAt(s));
            }
            return;
        }
        if let Some(n) = self.sessions[s].polls_left.as_mut() {
            *n -= 1;
        }
        let body = self.modbus_request(s);
        let sent = self.segment(now, s, true, TcpFlags::PSH | TcpFlags::ACK, &body);
        let answered = sent.is_some_and(|at| self.alive(sess.server, at));
        let next = match sent {
            Some(at) if answered => {
                let d = self.response_delay(sess.server);
                self.schedule(at + d, Ev::Respond(s));
                self.jittered(sess.client, sess.period)
            }
            _ => self.cfg.profile.plc_timeout,
        };
        self.schedule(now + next, Ev::Poll(s));
    }

    fn keepalive(&mut self, now: Timestamp, dev: DeviceId) {
        let p = &self.cfg.profile;
        let d = self.topo.device(dev).clone();
        let msg = StatusMessage {
            node_id: d.node_id.unwrap_or(0),
            msg_time: now.as_millis(),
            intrusion: false,
            mode: if now >= self.cfg.epoch + p.learning {
                Mode::Active
            } else {
                Mode::Learning
            },
            event_count: 0,
        };
        let payload = announce::encode(&msg, &p.psk);
        let period = p.keepalive_period;
        let jitter = p.keepalive_jitter;
        let ip_id = self.next_ip_id(dev);
        let frame = builder::udp_frame(
            d.mac,
            MacAddr::BROADCAST,
            d.ip,
            Ipv4Addr::BROADCAST,
            announce::DEFAULT_PORT,
            announce::DEFAULT_PORT,
            &payload,
            ip_id,
        );
        self.emit(now, dev, frame);
        let next = period + uniform(&mut self.rngs[dev], Duration::ZERO, jitter);
        self.schedule(now + next, Ev::Keepalive(dev));
    }

    fn run(mut self) {
        self.setup();
        while let Some(Scheduled { at, ev, .. }) = self.heap.pop() {
            self.handle(at, ev);
        }
    }
}

fn mbap(tx: [u8; 2], pdu: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + pdu.len());
    out.extend_from_slice(&tx);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(pdu.len() as u16 + 1).to_be_bytes());
    out.push(1);
    out.extend_from_slice(pdu);
    out
}

/// Run the simulation, handing every frame to `sink` in time order.
/// Returns the topology including attacker hosts.
pub fn run_with(cfg: &SimConfig, sink: impl FnMut(SimFrame)) -> Result<Topology, SimError> {
    cfg.validate()?;
    let sim = Sim::new(cfg, sink);
    let topo = sim.topo.clone();
    sim.run();
    Ok(topo)
}

/// Run the simulation and collect the whole trace.
pub fn run(cfg: &SimConfig) -> Result<FrameTrace, SimError> {
    let mut frames = Vec::new();
    let topology = run_with(cfg, |f| frames.push(f))?;
    Ok(FrameTrace::new(topology, frames))
}
