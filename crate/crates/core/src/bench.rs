//! Runs simulated traffic through one engine per edge node plus the central
//! logger, and scores attack scenarios.

use std::collections::BTreeMap;
use std::fmt;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::announce::{self, Psk, StatusMessage};
use crate::engine::{Cause, ConfigError, Engine, EngineConfig, IntrusionEvent};
use crate::logger::{IntrusionView, Liveness, Logger, NodeRecord};
use crate::packet::{parse_frame, Direction};
use crate::sim::{self, AttackScenario, DeviceId, Role, ScenarioKind, SimConfig, SimError, SimFrame, Topology};
use crate::time::Timestamp;

pub const HORIZON: Duration = Duration::from_secs(720);
pub const ATTACK_AT: Duration = Duration::from_secs(660);
/// Start of the attacker that is present while the engines learn.
pub const EARLY_ATTACK_AT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Engine(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FleetEvent {
    pub device: DeviceId,
    pub node_id: u16,
    pub event: IntrusionEvent,
}

#[derive(Debug)]
pub struct FleetRun {
    pub topology: Topology,
    pub engines: Vec<(DeviceId, Engine)>,
    pub events: Vec<FleetEvent>,
    /// Logger records whenever a node went down or reported an intrusion.
    pub logger_changes: Vec<(Timestamp, NodeRecord)>,
    pub logger: Logger,
    pub frames: u64,
}

impl FleetRun {
    pub fn engine(&self, dev: DeviceId) -> Option<&Engine> {
        self.engines.iter().find(|(d, _)| *d == dev).map(|(_, e)| e)
    }
}

struct Fleet {
    engines: Vec<(DeviceId, Engine)>,
    cloud: Option<DeviceId>,
    psk: Psk,
    logger: Logger,
    events: Vec<FleetEvent>,
    logger_changes: Vec<(Timestamp, NodeRecord)>,
    frames: u64,
}

impl Fleet {
    fn advance(&mut self, now: Timestamp) {
        for (dev, engine) in &mut self.engines {
            while let Some(d) = engine.next_deadline().filter(|&d| d <= now) {
                let node_id = engine.config().node_id;
                let evs = engine.tick(d);
                let stuck = evs.is_empty() && engine.next_deadline() == Some(d);
                self.events.extend(evs.into_iter().map(|event| FleetEvent {
                    device: *dev,
                    node_id,
                    event,
                }));
                if stuck {
                    break;
                }
            }
        }
        while let Some(d) = self.logger.next_deadline().filter(|&d| d <= now) {
            let changed = self.logger.sweep(d);
            if changed.is_empty() {
                break;
            }
            self.logger_changes.extend(changed.into_iter().map(|r| (d, r)));
        }
    }

    fn frame(&mut self, f: &SimFrame) {
        self.frames += 1;
        self.advance(f.time);
        for (dev, engine) in &mut self.engines {
            let Some(dir) = f.direction_for(*dev) else { continue };
            let node_id = engine.config().node_id;
            let (_, evs) = engine.ingest(dir, &f.bytes, f.time);
            self.events.extend(evs.into_iter().map(|event| FleetEvent {
                device: *dev,
                node_id,
                event,
            }));
        }
        if self.cloud.is_some_and(|c| f.direction_for(c) == Some(Direction::Rx)) {
            self.status_frame(f);
        }
    }

    /// Simulated nodes broadcast placeholder flags; the real ones come from
    /// the sending node's engine. Anything else reaches the logger verbatim.
    fn status_frame(&mut self, f: &SimFrame) {
        let Ok(meta) = parse_frame(&f.bytes, f.time, Direction::Rx) else { return };
        let Some(l4) = meta.l4() else { return };
        if l4.tcp_flags.is_some() || l4.dst_port != announce::DEFAULT_PORT {
            return;
        }
        let start = 14 + usize::from(f.bytes[14] & 0x0f) * 4 + 8;
        let Some(payload) = f.bytes.get(start..start + l4.payload_len) else { return };
        let engine = self.engines.iter().find(|(d, _)| *d == f.src).map(|(_, e)| e);
        let bytes = match (engine, announce::decode(payload, &self.psk)) {
            (Some(engine), Ok(msg)) => {
                let st = engine.status();
                announce::encode(
                    &StatusMessage {
                        intrusion: st.intrusion,
                        mode: st.mode,
                        event_count: st.event_count,
                        ..msg
                    },
                    &self.psk,
                )
                .to_vec()
            }
            _ => payload.to_vec(),
        };
        if let Ok(rec) = self.logger.on_datagram(&bytes, f.time) {
            if rec.intrusion_view == IntrusionView::Yes {
                self.logger_changes.push((f.time, rec));
            }
        }
    }
}

/// Simulate `sim_cfg` and feed every edge node's view into its own engine.
/// `template` supplies tolerances and the learning duration.
pub fn run_fleet(sim_cfg: &SimConfig, template: &EngineConfig) -> Result<FleetRun, BenchError> {
    sim_cfg.validate()?;
    let topology = sim_cfg.effective_topology();
    let mut engines = Vec::new();
    for dev in topology.edge_nodes() {
        let d = topology.device(dev);
        let mut engine = Engine::new(EngineConfig {
            local_ip: d.ip,
            node_id: d.node_id.unwrap_or(0),
            ..template.clone()
        })?;
        engine.tick(sim_cfg.epoch);
        engines.push((dev, engine));
    }
    let roster: Vec<u16> = topology
        .edge_nodes()
        .filter_map(|d| topology.device(d).node_id)
        .collect();
    let mut fleet = Fleet {
        engines,
        cloud: topology.first_with_role(Role::Cloud),
        psk: sim_cfg.profile.psk.clone(),
        logger: Logger::new(sim_cfg.profile.psk.clone()).with_roster(roster),
        events: Vec::new(),
        logger_changes: Vec::new(),
        frames: 0,
    };
    sim::run_with(sim_cfg, |f| fleet.frame(&f))?;
    fleet.advance(sim_cfg.epoch + sim_cfg.duration);
    Ok(FleetRun {
        topology,
        engines: fleet.engines,
        events: fleet.events,
        logger_changes: fleet.logger_changes,
        logger: fleet.logger,
        frames: fleet.frames,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub label: String,
    pub scenario: AttackScenario,
    pub expect_detected: bool,
}

/// All eight scenarios, the learning-phase attacker both continuing and
/// stopping once learning ends.
pub fn standard_cases(learning: Duration) -> Vec<Case> {
    let mut cases = Vec::new();
    for kind in ScenarioKind::ALL {
        if kind == ScenarioKind::LearningAttack {
            cases.push(Case {
                label: "learning (continues)".into(),
                scenario: AttackScenario::new(kind, EARLY_ATTACK_AT),
                expect_detected: false,
            });
            cases.push(Case {
                label: "learning (stops)".into(),
                scenario: AttackScenario::new(kind, EARLY_ATTACK_AT)
                    .with_duration(Some(learning.saturating_sub(EARLY_ATTACK_AT))),
                expect_detected: true,
            });
        } else {
            cases.push(Case {
                label: kind.name().into(),
                scenario: AttackScenario::new(kind, ATTACK_AT),
                expect_detected: kind != ScenarioKind::PassiveSniff,
            });
        }
    }
    cases
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub label: String,
    pub expected: bool,
    pub detected: bool,
    /// Offset from the start of the run.
    pub first_detection: Option<Duration>,
    pub events_by_cause: BTreeMap<Cause, usize>,
    pub logger_down: usize,
    pub logger_intrusion: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.expected == self.detected
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let when = self
            .first_detection
            .map_or("-".to_string(), |d| format!("{:.3}s", d.as_secs_f64()));
        let causes: Vec<String> = self
            .events_by_cause
            .iter()
            .map(|(c, n)| format!("{c}={n}"))
            .collect();
        write!(
            f,
            "{:<22} expected={:<5} detected={:<5} first={:<10} logger_down={} logger_yes={} [{}] {}",
            self.label,
            self.expected,
            self.detected,
            when,
            self.logger_down,
            self.logger_intrusion,
            causes.join(" "),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Nodes whose own reports cannot be trusted in a scenario.
fn untrusted(case: &Case, topo: &Topology) -> Option<DeviceId> {
    match case.scenario.kind {
        ScenarioKind::NodeRemoved | ScenarioKind::CaptureNode => topo.by_name(&case.scenario.target),
        _ => None,
    }
}

pub fn run_case(case: &Case, seed: u64, template: &EngineConfig) -> Result<CaseResult, BenchError> {
    let cfg = SimConfig {
        duration: HORIZON,
        seed,
        scenarios: vec![case.scenario.clone()],
        ..SimConfig::default()
    };
    let run = run_fleet(&cfg, template)?;
    let skip = untrusted(case, &run.topology);
    let skip_id = skip.and_then(|d| run.topology.device(d).node_id);
    let mut by_cause = BTreeMap::new();
    let mut first: Option<Timestamp> = None;
    for e in run.events.iter().filter(|e| Some(e.device) != skip) {
        *by_cause.entry(e.event.cause).or_insert(0) += 1;
        first = Some(first.map_or(e.event.at, |f| f.min(e.event.at)));
    }
    let (mut down, mut yes) = (0, 0);
    for (at, rec) in run.logger_changes.iter().filter(|(_, r)| Some(r.node_id) != skip_id) {
        match (rec.liveness, rec.intrusion_view) {
            (Liveness::Down, _) => down += 1,
            (_, IntrusionView::Yes) => yes += 1,
            _ => continue,
        }
        first = Some(first.map_or(*at, |f| f.min(*at)));
    }
    Ok(CaseResult {
        label: case.label.clone(),
        expected: case.expect_detected,
        detected: first.is_some(),
        first_detection: first.map(|t| t.saturating_since(cfg.epoch)),
        events_by_cause: by_cause,
        logger_down: down,
        logger_intrusion: yes,
    })
}

/// Every standard case, one thread each.
pub fn run_matrix(seed: u64, template: &EngineConfig) -> Result<Vec<CaseResult>, BenchError> {
    let cases = standard_cases(template.learning_duration);
    thread::scope(|s| {
        let handles: Vec<_> = cases
            .iter()
            .map(|c| s.spawn(move || run_case(c, seed, template)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(scenarios: Vec<AttackScenario>, secs: u64) -> (SimConfig, EngineConfig) {
        let cfg = SimConfig {
            duration: Duration::from_secs(secs),
            scenarios,
            ..SimConfig::default()
        };
        let eng = EngineConfig {
            learning_duration: Duration::from_secs(60),
            ..EngineConfig::default()
        };
        (cfg, eng)
    }

    #[test]
    fn benign_fleet_is_quiet() {
        let (cfg, eng) = short(vec![], 120);
        let run = run_fleet(&cfg, &eng).unwrap();
        assert_eq!(run.engines.len(), 9);
        assert!(run.events.is_empty(), "{:?}", run.events.first());
        assert!(run.logger_changes.is_empty());
        assert!(run.logger.nodes().all(|r| r.liveness == Liveness::Up));
    }

    #[test]
    fn injection_seen_by_victim_and_logger() {
        let (cfg, eng) = short(vec![AttackScenario::new(ScenarioKind::Inject, Duration::from_secs(90))], 120);
        let run = run_fleet(&cfg, &eng).unwrap();
        let s1 = run.topology.by_name("S1").unwrap();
        assert!(run
            .events
            .iter()
            .any(|e| e.device == s1 && e.event.cause == Cause::NewFlow));
        assert!(run
            .logger_changes
            .iter()
            .any(|(_, r)| r.node_id == 1 && r.intrusion_view == IntrusionView::Yes));
    }

    #[test]
    fn cases_cover_every_scenario() {
        let cases = standard_cases(Duration::from_secs(600));
        assert_eq!(cases.len(), 9);
        assert_eq!(cases.iter().filter(|c| !c.expect_detected).count(), 2);
        let stop = cases.iter().find(|c| c.label == "learning (stops)").unwrap();
        assert_eq!(stop.scenario.interval(HORIZON).1, Duration::from_secs(600));
    }
}
