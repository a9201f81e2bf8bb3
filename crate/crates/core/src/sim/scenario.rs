use std::fmt;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioKind {
    NodeRemoved = 1,
    ActiveSniff = 2,
    Spoof = 3,
    Inject = 4,
    DosFlood = 5,
    PassiveSniff = 6,
    LearningAttack = 7,
    CaptureNode = 8,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::NodeRemoved,
        ScenarioKind::ActiveSniff,
        ScenarioKind::Spoof,
        ScenarioKind::Inject,
        ScenarioKind::DosFlood,
        ScenarioKind::PassiveSniff,
        ScenarioKind::LearningAttack,
        ScenarioKind::CaptureNode,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::NodeRemoved => "remove",
            ScenarioKind::ActiveSniff => "active-sniff",
            ScenarioKind::Spoof => "spoof",
            ScenarioKind::Inject => "inject",
            ScenarioKind::DosFlood => "dos",
            ScenarioKind::PassiveSniff => "passive-sniff",
            ScenarioKind::LearningAttack => "learning",
            ScenarioKind::CaptureNode => "capture",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ScenarioKind::NodeRemoved => "Node removed",
            ScenarioKind::ActiveSniff => "Active sniffing",
            ScenarioKind::Spoof => "Spoofing attack",
            ScenarioKind::Inject => "Injection attack",
            ScenarioKind::DosFlood => "DoS attack",
            ScenarioKind::PassiveSniff => "Passive sniffing",
            ScenarioKind::LearningAttack => "Learning attack",
            ScenarioKind::CaptureNode => "Capture edge node",
        }
    }

    /// Accepts the short name or the number.
    pub fn parse(s: &str) -> Option<ScenarioKind> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.number().to_string() == s)
    }

    /// Default victim device.
    pub fn default_target(self) -> &'static str {
        match self {
            ScenarioKind::ActiveSniff => "PLC",
            _ => "S1",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackScenario {
    pub kind: ScenarioKind,
    /// Offset from the start of the simulation.
    pub start: Duration,
    /// Device name. For active sniffing this is the host whose IP gets
    /// rebound to the attacker.
    pub target: String,
    /// Flood rate in packets per second.
    pub rate: u32,
    /// How long the attack lasts; `None` runs to the end.
    pub duration: Option<Duration>,
    /// Poll period of the learning-phase attacker.
    pub period: Duration,
}

impl AttackScenario {
    pub fn new(kind: ScenarioKind, start: Duration) -> Self {
        AttackScenario {
            kind,
            start,
            target: kind.default_target().to_string(),
            rate: 1000,
            duration: match kind {
                ScenarioKind::DosFlood => Some(Duration::from_secs(30)),
                _ => None,
            },
            period: Duration::from_secs(1),
        }
    }

    pub fn with_target(mut self, target: &str) -> Self {
        self.target = target.to_string();
        self
    }

    pub fn with_duration(mut self, d: Option<Duration>) -> Self {
        self.duration = d;
        self
    }

    pub fn with_rate(mut self, rate: u32) -> Self {
        self.rate = rate;
        self
    }

    /// `[start, end)` within a run of length `horizon`.
    pub fn interval(&self, horizon: Duration) -> (Duration, Duration) {
        let end = match self.duration {
            Some(d) => (self.start + d).min(horizon),
            None => horizon,
        };
        (self.start, end)
    }

    /// Whether the scenario touches a victim at all.
    pub fn has_target(&self) -> bool {
        self.kind != ScenarioKind::PassiveSniff
    }
}

impl fmt::Display for AttackScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} target={} start={}us", self.kind, self.target, self.start.as_micros())?;
        match self.kind {
            ScenarioKind::DosFlood => write!(f, " rate={}", self.rate)?,
            ScenarioKind::LearningAttack => write!(f, " period={}us", self.period.as_micros())?,
            _ => {}
        }
        if let Some(d) = self.duration {
            write!(f, " duration={}us", d.as_micros())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_numbers() {
        for k in ScenarioKind::ALL {
            assert_eq!(ScenarioKind::parse(k.name()), Some(k));
            assert_eq!(ScenarioKind::parse(&k.number().to_string()), Some(k));
        }
        assert_eq!(ScenarioKind::parse("nope"), None);
    }

    #[test]
    fn interval_clamps_to_horizon() {
        let s = AttackScenario::new(ScenarioKind::DosFlood, Duration::from_secs(100));
        assert_eq!(s.interval(Duration::from_secs(110)), (Duration::from_secs(100), Duration::from_secs(110)));
        assert_eq!(s.interval(Duration::from_secs(1000)).1, Duration::from_secs(130));
    }
}
