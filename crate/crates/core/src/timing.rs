//! Per-flow interarrival baselines.
//!
//! A baseline is the envelope of interarrival times seen while learning:
//! extrema plus the arithmetic mean. Live traffic is checked against the
//! widened extrema first (`min·(1−Δ) < t < max·(1+Δ)`, strict), then against
//! a band of the same relative width around the mean, using the mean of the
//! last `W` accepted samples.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use thiserror::Error;

use crate::flow::{FlowKey, FlowKind};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TimingError {
    #[error("interarrival time must be positive")]
    NonPositiveInterarrival,
    #[error("baseline needs at least two learning samples, has {0}")]
    BaselineNotReady(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("tolerance must lie in [0, 2), got {0}")]
pub struct InvalidTolerance(pub f64);

/// Relative tolerance Δ, kept in thousandths so band checks stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tolerance(u32);

impl Tolerance {
    pub const MAX_MILLI: u32 = 1999;

    pub fn from_milli(milli: u32) -> Result<Self, InvalidTolerance> {
        if milli > Self::MAX_MILLI {
            return Err(InvalidTolerance(f64::from(milli) / 1000.0));
        }
        Ok(Tolerance(milli))
    }

    pub fn from_f64(delta: f64) -> Result<Self, InvalidTolerance> {
        if !(0.0..2.0).contains(&delta) {
            return Err(InvalidTolerance(delta));
        }
        let milli = (delta * 1000.0).round() as u32;
        Self::from_milli(milli.min(Self::MAX_MILLI))
    }

    pub fn milli(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimingVerdict {
    Ok,
    TooFast,
    TooSlow,
    MeanDrift,
}

impl TimingVerdict {
    pub fn is_ok(self) -> bool {
        self == TimingVerdict::Ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBaseline {
    /// Microseconds. Learning keeps it equal to `sum / n_l`; runtime
    /// adjustment moves it afterwards.
    pub learned_mean: f64,
    pub learned_min: u64,
    pub learned_max: u64,
    pub n_l: u64,
    pub delta: Tolerance,
    pub last_arrival: Option<Timestamp>,
    sum: u128,
}

impl FlowBaseline {
    pub fn new(delta: Tolerance) -> Self {
        FlowBaseline {
            learned_mean: 0.0,
            learned_min: u64::MAX,
            learned_max: 0,
            n_l: 0,
            delta,
            last_arrival: None,
            sum: 0,
        }
    }

    /// Rebuild a finished baseline, e.g. from a model file.
    pub fn from_parts(mean_us: f64, min_us: u64, max_us: u64, n_l: u64, delta: Tolerance) -> Self {
        FlowBaseline {
            learned_mean: mean_us,
            learned_min: min_us,
            learned_max: max_us,
            n_l,
            delta,
            last_arrival: None,
            sum: (mean_us.max(0.0) as u128) * u128::from(n_l),
        }
    }

    pub fn is_ready(&self) -> bool {
        self.n_l >= 2
    }

    pub fn record_learning_sample(&mut self, t_l: Duration) -> Result<(), TimingError> {
        let t = t_l.as_micros() as u64;
        if t == 0 {
            return Err(TimingError::NonPositiveInterarrival);
        }
        self.learned_min = self.learned_min.min(t);
        self.learned_max = self.learned_max.max(t);
        self.sum += u128::from(t);
        self.n_l += 1;
        self.learned_mean = self.sum as f64 / self.n_l as f64;
        Ok(())
    }

    /// `t ≤ min·(1−Δ)`, evaluated in integers. A lower band at or below zero
    /// never fires.
    pub fn is_too_fast(&self, t_us: u64) -> bool {
        let d = u128::from(self.delta.milli());
        if d >= 1000 {
            return false;
        }
        u128::from(t_us) * 1000 <= u128::from(self.learned_min) * (1000 - d)
    }

    /// `t ≥ max·(1+Δ)`, evaluated in integers.
    pub fn is_too_slow(&self, t_us: u64) -> bool {
        let d = u128::from(self.delta.milli());
        u128::from(t_us) * 1000 >= u128::from(self.learned_max) * (1000 + d)
    }

    /// Smallest silence, in microseconds, that counts as too slow.
    pub fn silence_bound_us(&self) -> u64 {
        let d = u128::from(self.delta.milli());
        let scaled = u128::from(self.learned_max) * (1000 + d);
        scaled.div_ceil(1000).min(u128::from(u64::MAX)) as u64
    }

    /// Mean band `[mean·(1−Δ), mean·(1+Δ)]`; values on or beyond an edge drift.
    pub fn mean_band(&self) -> (f64, f64) {
        let d = self.delta.as_f64();
        (self.learned_mean * (1.0 - d), self.learned_mean * (1.0 + d))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveWindow {
    samples: VecDeque<u64>,
    running_sum: u64,
    capacity: usize,
}

impl ActiveWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        ActiveWindow {
            samples: VecDeque::with_capacity(capacity),
            running_sum: 0,
            capacity,
        }
    }

    pub fn push(&mut self, t_us: u64) {
        if self.samples.len() == self.capacity {
            if let Some(old) = self.samples.pop_front() {
                self.running_sum -= old;
            }
        }
        self.samples.push_back(t_us);
        self.running_sum += t_us;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn running_sum(&self) -> u64 {
        self.running_sum
    }

    pub fn samples(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.samples.is_empty() {
            None
        } else {
            Some(self.running_sum as f64 / self.samples.len() as f64)
        }
    }
}

pub fn check_packet(
    baseline: &FlowBaseline,
    window: &mut ActiveWindow,
    t_current: Duration,
) -> Result<TimingVerdict, TimingError> {
    if !baseline.is_ready() {
        return Err(TimingError::BaselineNotReady(baseline.n_l));
    }
    let t = t_current.as_micros() as u64;
    if t == 0 {
        return Err(TimingError::NonPositiveInterarrival);
    }
    if baseline.is_too_fast(t) {
        return Ok(TimingVerdict::TooFast);
    }
    if baseline.is_too_slow(t) {
        return Ok(TimingVerdict::TooSlow);
    }
    window.push(t);
    let mean = window.mean().unwrap_or(t as f64);
    let (lo, hi) = baseline.mean_band();
    if mean <= lo || mean >= hi {
        Ok(TimingVerdict::MeanDrift)
    } else {
        Ok(TimingVerdict::Ok)
    }
}

/// Exponentially weighted nudge of the mean; extrema stay frozen.
pub fn update_runtime_baseline(baseline: &mut FlowBaseline, t: Duration, alpha: f64) {
    let t = t.as_micros() as f64;
    baseline.learned_mean += alpha * (t - baseline.learned_mean);
}

pub fn absence_check(baseline: &FlowBaseline, now: Timestamp) -> Option<TimingVerdict> {
    let last = baseline.last_arrival?;
    if !baseline.is_ready() {
        return None;
    }
    let silence = now.saturating_since(last).as_micros() as u64;
    baseline.is_too_slow(silence).then_some(TimingVerdict::TooSlow)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingConfig {
    pub delta: Tolerance,
    pub delta_arp: Tolerance,
    pub window: usize,
    pub alpha: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            delta: Tolerance(300),
            delta_arp: Tolerance(1000),
            window: 16,
            alpha: 1.0 / 256.0,
        }
    }
}

impl TimingConfig {
    pub fn delta_for(&self, kind: FlowKind) -> Tolerance {
        match kind {
            FlowKind::Arp => self.delta_arp,
            _ => self.delta,
        }
    }
}

#[derive(Debug, Clone)]
struct FlowTiming {
    baseline: FlowBaseline,
    window: ActiveWindow,
    silent: bool,
}

/// A classified live sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub verdict: TimingVerdict,
    pub interarrival_us: u64,
}

/// A flow that went quiet for too long.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Silence {
    pub key: FlowKey,
    pub silence_us: u64,
    pub bound_us: u64,
}

/// Baselines of every flow seen by one node.
#[derive(Debug, Clone)]
pub struct TimingDetector {
    cfg: TimingConfig,
    flows: BTreeMap<FlowKey, FlowTiming>,
}

fn interarrival(prev: Timestamp, now: Timestamp) -> u64 {
    // Capture-resolution ties become one microsecond.
    (now.saturating_since(prev).as_micros() as u64).max(1)
}

impl TimingDetector {
    pub fn new(cfg: TimingConfig) -> Self {
        TimingDetector {
            cfg,
            flows: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &TimingConfig {
        &self.cfg
    }

    fn entry(&mut self, key: &FlowKey) -> &mut FlowTiming {
        let cfg = self.cfg;
        self.flows.entry(*key).or_insert_with(|| FlowTiming {
            baseline: FlowBaseline::new(cfg.delta_for(key.kind)),
            window: ActiveWindow::new(cfg.window),
            silent: false,
        })
    }

    pub fn learn(&mut self, key: &FlowKey, at: Timestamp) {
        let ft = self.entry(key);
        if let Some(prev) = ft.baseline.last_arrival {
            let t = interarrival(prev, at);
            ft.baseline
                .record_learning_sample(Duration::from_micros(t))
                .expect("interarrival clamped to be positive");
        }
        ft.baseline.last_arrival = Some(at);
    }

    /// Classify one live arrival. `None` for flows without a usable baseline
    /// and for the first arrival after an import.
    pub fn observe(&mut self, key: &FlowKey, at: Timestamp) -> Option<Sample> {
        let alpha = self.cfg.alpha;
        let ft = self.entry(key);
        let prev = ft.baseline.last_arrival.replace(at);
        ft.silent = false;
        let prev = prev?;
        if !ft.baseline.is_ready() {
            return None;
        }
        let t = interarrival(prev, at);
        let verdict = check_packet(&ft.baseline, &mut ft.window, Duration::from_micros(t))
            .expect("ready baseline and positive interarrival");
        if verdict.is_ok() {
            update_runtime_baseline(&mut ft.baseline, Duration::from_micros(t), alpha);
        }
        Some(Sample {
            verdict,
            interarrival_us: t,
        })
    }

    /// Absence check over all baselines. A flow reports once per silence.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Silence> {
        let mut out = Vec::new();
        for (key, ft) in self.flows.iter_mut() {
            if ft.silent {
                continue;
            }
            if absence_check(&ft.baseline, now).is_some() {
                ft.silent = true;
                let last = ft.baseline.last_arrival.unwrap_or(now);
                out.push(Silence {
                    key: *key,
                    silence_us: now.saturating_since(last).as_micros() as u64,
                    bound_us: ft.baseline.silence_bound_us(),
                });
            }
        }
        out
    }

    /// Earliest instant at which [`TimingDetector::tick`] would report.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.flows
            .values()
            .filter(|ft| !ft.silent && ft.baseline.is_ready())
            .filter_map(|ft| {
                let last = ft.baseline.last_arrival?;
                Some(last + Duration::from_micros(ft.baseline.silence_bound_us()))
            })
            .min()
    }

    pub fn baseline(&self, key: &FlowKey) -> Option<&FlowBaseline> {
        self.flows.get(key).map(|ft| &ft.baseline)
    }

    /// Ready baselines in key order.
    pub fn baselines(&self) -> impl Iterator<Item = (&FlowKey, &FlowBaseline)> {
        self.flows
            .iter()
            .filter(|(_, ft)| ft.baseline.is_ready())
            .map(|(k, ft)| (k, &ft.baseline))
    }

    pub fn insert_baseline(&mut self, key: FlowKey, baseline: FlowBaseline) {
        let window = ActiveWindow::new(self.cfg.window);
        self.flows.insert(
            key,
            FlowTiming {
                baseline,
                window,
                silent: false,
            },
        );
    }
}
