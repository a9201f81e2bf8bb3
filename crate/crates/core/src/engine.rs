//! Per-node detection engine on the RX/TX path.

use std::fmt;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::flow::{FlowKey, FlowKind, FlowTable, FlowVerdict, Mode};
use crate::model::{Model, ModelError, TimingRecord};
use crate::packet::{parse_frame, ArpOp, Direction, MacAddr, Network, PacketMeta};
use crate::time::Timestamp;
use crate::timing::{FlowBaseline, Tolerance, TimingConfig, TimingDetector, TimingVerdict};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub learning_duration: Duration,
    pub delta_default: f64,
    pub delta_arp: f64,
    pub window_w: usize,
    pub alpha: f64,
    pub ips_mode: bool,
    pub local_ip: Ipv4Addr,
    pub node_id: u16,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            learning_duration: Duration::from_secs(600),
            delta_default: 0.3,
            delta_arp: 1.0,
            window_w: 16,
            alpha: 1.0 / 256.0,
            ips_mode: false,
            local_ip: Ipv4Addr::UNSPECIFIED,
            node_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("learning duration must be positive")]
    ZeroLearningDuration,
    #[error("{name} must lie in [0, 2), got {value}")]
    Tolerance { name: &'static str, value: f64 },
    #[error("window size must be positive")]
    ZeroWindow,
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.learning_duration.is_zero() {
            return Err(ConfigError::ZeroLearningDuration);
        }
        Tolerance::from_f64(self.delta_default).map_err(|_| ConfigError::Tolerance {
            name: "delta",
            value: self.delta_default,
        })?;
        Tolerance::from_f64(self.delta_arp).map_err(|_| ConfigError::Tolerance {
            name: "delta-arp",
            value: self.delta_arp,
        })?;
        if self.window_w == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        Ok(())
    }

    fn timing(&self) -> TimingConfig {
        TimingConfig {
            delta: Tolerance::from_f64(self.delta_default).expect("validated"),
            delta_arp: Tolerance::from_f64(self.delta_arp).expect("validated"),
            window: self.window_w,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cause {
    NewFlow,
    BindingConflict,
    L2L3Mismatch,
    TooFast,
    TooSlow,
    MeanDrift,
    HostSilent,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::NewFlow => "NewFlow",
            Cause::BindingConflict => "BindingConflict",
            Cause::L2L3Mismatch => "L2L3Mismatch",
            Cause::TooFast => "TooFast",
            Cause::TooSlow => "TooSlow",
            Cause::MeanDrift => "MeanDrift",
            Cause::HostSilent => "HostSilent",
        }
    }
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntrusionEvent {
    pub at: Timestamp,
    pub flow: FlowKey,
    pub cause: Cause,
    pub detail: String,
}

impl IntrusionEvent {
    /// `ISO8601 node_id cause flow detail`, tab separated, no newline.
    pub fn log_line(&self, node_id: u16) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.at.to_iso8601(),
            node_id,
            self.cause,
            self.flow,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Pass,
    Alert,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeStatus {
    pub mode: Mode,
    /// Any event since the previous status read.
    pub intrusion: bool,
    pub flow_count: usize,
    pub event_count: u16,
}

#[derive(Debug, Default)]
struct SharedStatus {
    active: AtomicU8,
    intrusion: AtomicBool,
    flow_count: AtomicUsize,
    events: AtomicU32,
}

/// Read side of an engine's status, usable from another thread.
#[derive(Debug, Clone)]
pub struct StatusHandle(Arc<SharedStatus>);

impl StatusHandle {
    /// Reads and clears the intrusion latch and the event counter.
    pub fn read(&self) -> NodeStatus {
        let s = &self.0;
        NodeStatus {
            mode: if s.active.load(Ordering::Acquire) == 1 {
                Mode::Active
            } else {
                Mode::Learning
            },
            intrusion: s.intrusion.swap(false, Ordering::AcqRel),
            flow_count: s.flow_count.load(Ordering::Acquire),
            event_count: s.events.swap(0, Ordering::AcqRel).min(u32::from(u16::MAX)) as u16,
        }
    }
}

/// Whether a packet contributes an interarrival sample. Only received
/// traffic is timed; connection setup and teardown are irregular by nature,
/// and ARP is timed on requests for this node's own address.
pub fn timing_eligible(meta: &PacketMeta, local_ip: Ipv4Addr) -> bool {
    if meta.direction != Direction::Rx {
        return false;
    }
    match &meta.network {
        Network::Arp(arp) => arp.op == ArpOp::Request && arp.target_ip == local_ip,
        Network::Ipv4(_) => match meta.l4().and_then(|l4| l4.tcp_flags) {
            Some(flags) => !flags.is_control(),
            None => true,
        },
        Network::Opaque => true,
    }
}

pub struct Engine {
    cfg: EngineConfig,
    mode: Mode,
    start: Option<Timestamp>,
    table: FlowTable,
    timing: TimingDetector,
    status: Arc<SharedStatus>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("node_id", &self.cfg.node_id)
            .field("mode", &self.mode)
            .field("flows", &self.table.flow_count())
            .finish()
    }
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Engine {
            table: FlowTable::new(cfg.local_ip),
            timing: TimingDetector::new(cfg.timing()),
            cfg,
            mode: Mode::Learning,
            start: None,
            status: Arc::new(SharedStatus::default()),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn flow_table(&self) -> &FlowTable {
        &self.table
    }

    pub fn timing(&self) -> &TimingDetector {
        &self.timing
    }

    pub fn status_handle(&self) -> StatusHandle {
        StatusHandle(Arc::clone(&self.status))
    }

    pub fn status(&self) -> NodeStatus {
        self.status_handle().read()
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.status
            .active
            .store(u8::from(mode == Mode::Active), Ordering::Release);
    }

    /// Leave the learning phase now, regardless of the configured duration.
    pub fn finish_learning(&mut self) {
        self.set_mode(Mode::Active);
    }

    fn record(&self, events: &[IntrusionEvent]) {
        self.status
            .flow_count
            .store(self.table.flow_count(), Ordering::Release);
        if !events.is_empty() {
            self.status.intrusion.store(true, Ordering::Release);
            self.status
                .events
                .fetch_add(events.len() as u32, Ordering::AcqRel);
        }
    }

    pub fn ingest(&mut self, direction: Direction, frame: &[u8], now: Timestamp) -> (Verdict, Vec<IntrusionEvent>) {
        self.start.get_or_insert(now);
        let meta = match parse_frame(frame, now, direction) {
            Ok(meta) => meta,
            Err(err) => {
                if self.mode == Mode::Learning {
                    return (Verdict::Pass, Vec::new());
                }
                let src = if frame.len() >= 12 {
                    let mut m = [0u8; 6];
                    m.copy_from_slice(&frame[6..12]);
                    MacAddr(m)
                } else {
                    MacAddr::ZERO
                };
                let events = vec![IntrusionEvent {
                    at: now,
                    flow: FlowKey::link(FlowKind::OtherEth, src, self.cfg.local_ip),
                    cause: Cause::NewFlow,
                    detail: format!("unparseable: {err}"),
                }];
                self.record(&events);
                return (self.verdict_for(&events), events);
            }
        };
        let events = self.ingest_meta(&meta);
        (self.verdict_for(&events), events)
    }

    fn verdict_for(&self, events: &[IntrusionEvent]) -> Verdict {
        match (events.is_empty(), self.cfg.ips_mode) {
            (true, _) => Verdict::Pass,
            (false, true) => Verdict::Drop,
            (false, false) => Verdict::Alert,
        }
    }

    fn ingest_meta(&mut self, meta: &PacketMeta) -> Vec<IntrusionEvent> {
        let eligible = timing_eligible(meta, self.cfg.local_ip);
        let obs = self.table.observe(meta, self.mode);
        if self.mode == Mode::Learning {
            if eligible {
                self.timing.learn(&obs.key, meta.timestamp);
            }
            self.record(&[]);
            return Vec::new();
        }

        let mut events: Vec<IntrusionEvent> = obs
            .findings
            .into_iter()
            .map(|f| IntrusionEvent {
                at: meta.timestamp,
                flow: obs.key,
                cause: match f.verdict {
                    FlowVerdict::NewFlow => Cause::NewFlow,
                    FlowVerdict::BindingConflict => Cause::BindingConflict,
                    FlowVerdict::L2L3Mismatch => Cause::L2L3Mismatch,
                    FlowVerdict::Known => unreachable!("findings never carry Known"),
                },
                detail: f.detail,
            })
            .collect();

        if eligible {
            if let Some(sample) = self.timing.observe(&obs.key, meta.timestamp) {
                let cause = match sample.verdict {
                    TimingVerdict::Ok => None,
                    TimingVerdict::TooFast => Some(Cause::TooFast),
                    TimingVerdict::TooSlow => Some(Cause::TooSlow),
                    TimingVerdict::MeanDrift => Some(Cause::MeanDrift),
                };
                if let Some(cause) = cause {
                    let b = self.timing.baseline(&obs.key).expect("sampled flow has a baseline");
                    events.push(IntrusionEvent {
                        at: meta.timestamp,
                        flow: obs.key,
                        cause,
                        detail: format!(
                            "interarrival {} us, learned min {} max {} mean {:.0} us",
                            sample.interarrival_us, b.learned_min, b.learned_max, b.learned_mean
                        ),
                    });
                }
            }
        }
        self.record(&events);
        events
    }

    /// Clock-driven work: the end of learning and absence checks.
    pub fn tick(&mut self, now: Timestamp) -> Vec<IntrusionEvent> {
        let start = *self.start.get_or_insert(now);
        if self.mode == Mode::Learning {
            if now >= start + self.cfg.learning_duration {
                self.set_mode(Mode::Active);
            }
            return Vec::new();
        }
        let events: Vec<IntrusionEvent> = self
            .timing
            .tick(now)
            .into_iter()
            .map(|s| IntrusionEvent {
                at: now,
                flow: s.key,
                cause: Cause::HostSilent,
                detail: format!("silent for {} us, bound {} us", s.silence_us, s.bound_us),
            })
            .collect();
        self.record(&events);
        events
    }

    /// Next instant at which [`Engine::tick`] has work to do.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        match self.mode {
            Mode::Learning => self.start.map(|s| s + self.cfg.learning_duration),
            Mode::Active => self.timing.next_deadline(),
        }
    }

    pub fn to_model(&self) -> Model {
        Model {
            flows: self.table.flows().copied().collect(),
            bindings: self.table.bindings().map(|b| (b.ip, b.mac)).collect(),
            timings: self
                .timing
                .baselines()
                .map(|(k, b)| {
                    (
                        *k,
                        TimingRecord {
                            mean_us: b.learned_mean.round() as u64,
                            min_us: b.learned_min,
                            max_us: b.learned_max,
                            n_l: b.n_l,
                            delta_milli: b.delta.milli(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn export_model(&self) -> Vec<u8> {
        self.to_model().render().into_bytes()
    }

    /// Load a model and switch to active mode.
    pub fn import_model(&mut self, bytes: &[u8]) -> Result<(), ModelError> {
        let text = String::from_utf8_lossy(bytes);
        let model = Model::parse(&text)?;
        let mut table = FlowTable::new(self.cfg.local_ip);
        let mut timing = TimingDetector::new(self.cfg.timing());
        for k in &model.flows {
            table.insert_flow(*k);
        }
        for (ip, mac) in &model.bindings {
            table.insert_binding(*ip, *mac, Timestamp::ZERO);
        }
        for (line, (k, t)) in model.timings.iter().enumerate() {
            let delta = Tolerance::from_milli(t.delta_milli).map_err(|_| ModelError::MalformedModelLine {
                line: line + 1,
                reason: "tolerance out of range".into(),
            })?;
            timing.insert_baseline(
                *k,
                FlowBaseline::from_parts(t.mean_us as f64, t.min_us, t.max_us, t.n_l, delta),
            );
        }
        self.table = table;
        self.timing = timing;
        self.set_mode(Mode::Active);
        self.record(&[]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{self, TcpSegment};
    use crate::packet::{ArpMeta, TcpFlags};
    use proptest::prelude::*;

    const PLC: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 50);
    const S1: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 101);
    const ROGUE: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 200);
    const PLC_MAC: MacAddr = MacAddr::new(2, 0, 0, 0, 0, 50);
    const S1_MAC: MacAddr = MacAddr::new(2, 0, 0, 0, 0, 101);
    const ROGUE_MAC: MacAddr = MacAddr::new(2, 0, 0, 0, 0xa, 1);

    fn cfg(ips: bool) -> EngineConfig {
        EngineConfig {
            local_ip: S1,
            node_id: 1,
            ips_mode: ips,
            learning_duration: Duration::from_secs(10),
            ..EngineConfig::default()
        }
    }

    fn poll_from(src_mac: MacAddr, src_ip: Ipv4Addr, port: u16) -> Vec<u8> {
        builder::pad_to_minimum(builder::tcp_frame(&TcpSegment {
            src_mac,
            dst_mac: S1_MAC,
            src_ip,
            dst_ip: S1,
            src_port: port,
            dst_port: 502,
            seq: 0,
            ack: 0,
            flags: TcpFlags::PSH | TcpFlags::ACK,
            ip_id: 0,
            payload: &[0, 1, 0, 0, 0, 6, 1, 3, 0, 0, 0, 1],
        }))
    }

    fn arp_req() -> Vec<u8> {
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

    fn t(ms: u64) -> Timestamp {
        Timestamp::from_micros(1_600_000_000_000_000 + ms * 1000)
    }

    /// Learns 10 s of 100 ms polls and switches to active.
    fn trained(ips: bool) -> Engine {
        let mut e = Engine::new(cfg(ips)).unwrap();
        e.ingest(Direction::Rx, &arp_req(), t(0));
        for i in 0..100 {
            let (v, ev) = e.ingest(Direction::Rx, &poll_from(PLC_MAC, PLC, 49152), t(i * 100));
            assert_eq!((v, ev.len()), (Verdict::Pass, 0));
        }
        assert!(e.tick(t(9_999)).is_empty());
        assert_eq!(e.mode(), Mode::Learning);
        assert!(e.tick(t(10_000)).is_empty());
        assert_eq!(e.mode(), Mode::Active);
        e
    }

    #[test]
    fn fresh_status() {
        let e = Engine::new(cfg(false)).unwrap();
        let s = e.status();
        assert_eq!((s.mode, s.intrusion), (Mode::Learning, false));
    }

    #[test]
    fn invalid_config() {
        let bad = EngineConfig {
            delta_default: 2.0,
            ..cfg(false)
        };
        assert!(Engine::new(bad).is_err());
        let bad = EngineConfig {
            learning_duration: Duration::ZERO,
            ..cfg(false)
        };
        assert!(Engine::new(bad).is_err());
    }

    #[test]
    fn benign_continuation_is_quiet() {
        let mut e = trained(false);
        for i in 100..200 {
            assert!(e.tick(t(i * 100)).is_empty());
            let (v, ev) = e.ingest(Direction::Rx, &poll_from(PLC_MAC, PLC, 49153), t(i * 100));
            assert_eq!(v, Verdict::Pass, "{ev:?}");
        }
        assert!(!e.status().intrusion);
    }

    #[test]
    fn flood_is_too_fast() {
        let mut e = trained(false);
        let (v, ev) = e.ingest(Direction::Rx, &poll_from(PLC_MAC, PLC, 49152), t(10_000));
        assert_eq!(v, Verdict::Pass, "{ev:?}");
        let (v, ev) = e.ingest(Direction::Rx, &poll_from(PLC_MAC, PLC, 49152), t(10_001));
        assert_eq!(v, Verdict::Alert);
        assert_eq!(ev[0].cause, Cause::TooFast);
        let s = e.status();
        assert!(s.intrusion);
        assert_eq!(s.event_count, 1);
        assert!(!e.status().intrusion);
    }

    #[test]
    fn injection_dropped_in_ips_mode() {
        let mut e = trained(true);
        let (v, ev) = e.ingest(Direction::Rx, &poll_from(ROGUE_MAC, ROGUE, 40000), t(10_050));
        assert_eq!(v, Verdict::Drop);
        assert_eq!(ev.iter().map(|e| e.cause).collect::<Vec<_>>(), vec![Cause::NewFlow]);
    }

    #[test]
    fn unparseable_frame() {
        let mut e = Engine::new(cfg(false)).unwrap();
        assert_eq!(e.ingest(Direction::Rx, &[0; 5], t(0)).0, Verdict::Pass);
        let mut e = trained(false);
        let (v, ev) = e.ingest(Direction::Rx, &[0; 5], t(10_010));
        assert_eq!(v, Verdict::Alert);
        assert_eq!(ev[0].cause, Cause::NewFlow);
        assert!(ev[0].detail.starts_with("unparseable"));
    }

    #[test]
    fn silence_and_idempotent_ticks() {
        let mut e = trained(false);
        // Last poll at 9.9 s, learned max 100 ms, bound 130 ms.
        assert_eq!(e.next_deadline(), Some(t(9_900 + 130)));
        let ev = e.tick(t(10_030));
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].cause, Cause::HostSilent);
        assert!(e.tick(t(10_040)).is_empty());
        assert!(e.tick(t(10_050)).is_empty());
    }

    #[test]
    fn model_round_trip() {
        let e = trained(false);
        let bytes = e.export_model();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("TIMING\ttcp\t192.168.1.50\t192.168.1.101\t502\t100000\t100000\t100000\t99\t300"));
        let mut f = Engine::new(cfg(false)).unwrap();
        f.import_model(&bytes).unwrap();
        assert_eq!(f.mode(), Mode::Active);
        assert_eq!(f.export_model(), bytes);
        assert!(matches!(
            f.import_model(b"EIDS-MODEL 2\n"),
            Err(ModelError::BadModelVersion(_))
        ));
    }

    #[test]
    fn event_log_line() {
        let ev = IntrusionEvent {
            at: Timestamp::from_micros(1_600_000_000_123_456),
            flow: FlowKey::ip(FlowKind::Tcp, PLC, S1, 502),
            cause: Cause::TooFast,
            detail: "x".into(),
        };
        assert_eq!(
            ev.log_line(3),
            "2020-09-13T12:26:40.123456Z\t3\tTooFast\ttcp/192.168.1.50/192.168.1.101/502\tx"
        );
    }

    fn arb_frame() -> impl Strategy<Value = Vec<u8>> {
        prop_oneof![
            (0u64..3).prop_map(|i| poll_from(PLC_MAC, PLC, 49152 + i as u16)),
            Just(poll_from(ROGUE_MAC, ROGUE, 40000)),
            Just(poll_from(ROGUE_MAC, PLC, 40000)),
            Just(arp_req()),
            prop::collection::vec(any::<u8>(), 0..80),
        ]
    }

    proptest! {
        #[test]
        fn learning_is_total(frames in prop::collection::vec((arb_frame(), 1u64..500), 0..60)) {
            let mut e = Engine::new(EngineConfig { learning_duration: Duration::from_secs(3600), ..cfg(true) }).unwrap();
            let mut at = 0;
            for (f, gap) in &frames {
                at += gap;
                let (v, ev) = e.ingest(Direction::Rx, f, t(at));
                prop_assert_eq!(v, Verdict::Pass);
                prop_assert!(ev.is_empty());
                prop_assert!(e.tick(t(at)).is_empty());
            }
        }

        #[test]
        fn drop_equals_alert_without_ips(frames in prop::collection::vec((arb_frame(), 1u64..300), 0..60)) {
            let mut a = trained(true);
            let mut b = trained(false);
            let mut at = 10_000;
            for (f, gap) in &frames {
                at += gap;
                let (va, ea) = a.ingest(Direction::Rx, f, t(at));
                let (vb, eb) = b.ingest(Direction::Rx, f, t(at));
                prop_assert_eq!(&ea, &eb);
                prop_assert_eq!(va == Verdict::Drop, vb == Verdict::Alert);
                prop_assert_eq!(va == Verdict::Pass, ea.is_empty());
                prop_assert_eq!(a.tick(t(at)), b.tick(t(at)));
            }
        }
    }
}
