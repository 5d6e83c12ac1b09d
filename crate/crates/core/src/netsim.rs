//! Byte accounting and a latency-plus-bandwidth link model.
//!
//! Every message crossing the cut layer is recorded with its exact encoded
//! size; simulated time is derived from bytes alone, so runs are
//! reproducible regardless of host speed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Direction;

/// Per-direction transfer rates in bytes per second and a fixed latency per message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub uplink_bytes_per_sec: f64,
    pub downlink_bytes_per_sec: f64,
    #[serde(default)]
    pub latency_sec: f64,
}

impl Default for LinkModel {
    /// 10 Mbit/s up, 50 Mbit/s down, 10 ms per message.
    fn default() -> Self {
        Self {
            uplink_bytes_per_sec: 1.25e6,
            downlink_bytes_per_sec: 6.25e6,
            latency_sec: 0.01,
        }
    }
}

impl LinkModel {
    pub fn new(uplink_bytes_per_sec: f64, downlink_bytes_per_sec: f64, latency_sec: f64) -> Result<Self> {
        let link = Self {
            uplink_bytes_per_sec,
            downlink_bytes_per_sec,
            latency_sec,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = [self.uplink_bytes_per_sec, self.downlink_bytes_per_sec]
            .iter()
            .all(|r| r.is_finite() && *r > 0.0);
        if !rates_ok || !self.latency_sec.is_finite() || self.latency_sec < 0.0 {
            return Err(Error::Config(format!(
                "link needs positive finite rates and non-negative latency, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Activations travel up, gradients travel down.
    pub fn rate(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Activations => self.uplink_bytes_per_sec,
            Direction::Gradients => self.downlink_bytes_per_sec,
        }
    }

    /// `latency + bytes / rate`.
    pub fn transfer_seconds(&self, direction: Direction, bytes: u64) -> f64 {
        self.latency_sec + bytes as f64 / self.rate(direction)
    }
}

/// How per-device times combine into a round time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Devices transmit concurrently: the slowest device sets the pace.
    #[default]
    Parallel,
    /// Devices transmit one after another.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub round: u32,
    pub device: usize,
    pub direction: Direction,
    pub bytes: u64,
    pub sim_seconds: f64,
}

impl LedgerEntry {
    fn key(&self) -> (u32, usize, u8) {
        (self.round, self.device, self.direction.to_byte())
    }
}

/// Append-only message log, kept sorted by (round, device, direction).
#[derive(Debug, Clone, PartialEq)]
pub struct CommLedger {
    link: LinkModel,
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new(link: LinkModel) -> Result<Self> {
        link.validate()?;
        Ok(Self {
            link,
            entries: Vec::new(),
        })
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Logs one message. Entries with equal keys keep insertion order.
    pub fn record(&mut self, round: u32, device: usize, direction: Direction, bytes: u64) -> &LedgerEntry {
        let entry = LedgerEntry {
            round,
            device,
            direction,
            bytes,
            sim_seconds: self.link.transfer_seconds(direction, bytes),
        };
        let at = self.entries.partition_point(|e| e.key() <= entry.key());
        self.entries.insert(at, entry);
        &self.entries[at]
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn bytes_for(&self, round: u32, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.round == round && e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    /// Communication time of one round: each device's messages run back to
    /// back, and devices combine per `aggregation`.
    pub fn round_seconds(&self, round: u32, aggregation: Aggregation) -> f64 {
        let mut per_device: BTreeMap<usize, f64> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.round == round) {
            *per_device.entry(e.device).or_insert(0.0) += e.sim_seconds;
        }
        match aggregation {
            Aggregation::Parallel => per_device.values().fold(0.0, |a, &b| a.max(b)),
            Aggregation::Sequential => per_device.values().sum(),
        }
    }

    /// `round,device,direction,bytes,sim_seconds`, one row per message.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,device,direction,bytes,sim_seconds\n");
        for e in &self.entries {
            let dir = match e.direction {
                Direction::Activations => "uplink",
                Direction::Gradients => "downlink",
            };
            writeln!(out, "{},{},{},{},{}", e.round, e.device, dir, e.bytes, e.sim_seconds).expect("string write");
        }
        out
    }
}

/// One point of a training trajectory: accuracy after `round` and the
/// simulated seconds that round took.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Progress {
    pub round: u32,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TimeToAccuracy {
    Reached { seconds: f64, round: u32 },
    NotReached,
}

impl TimeToAccuracy {
    pub fn seconds(&self) -> Option<f64> {
        match self {
            TimeToAccuracy::Reached { seconds, .. } => Some(*seconds),
            TimeToAccuracy::NotReached => None,
        }
    }

    /// True when `self` reaches the target no later than `other`.
    pub fn no_later_than(&self, other: &TimeToAccuracy) -> bool {
        match (self.seconds(), other.seconds()) {
            (Some(a), Some(b)) => a <= b,
            (Some(_), None) | (None, None) => true,
            (None, Some(_)) => false,
        }
    }
}

/// Cumulative simulated time at the first point whose accuracy reaches `target`.
pub fn time_to_accuracy(trajectory: &[Progress], target: f64) -> TimeToAccuracy {
    let mut elapsed = 0.0;
    for p in trajectory {
        elapsed += p.seconds;
        if p.accuracy >= target {
            return TimeToAccuracy::Reached {
                seconds: elapsed,
                round: p.round,
            };
        }
    }
    TimeToAccuracy::NotReached
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(rate: f64, latency: f64) -> LinkModel {
        LinkModel::new(rate, rate, latency).unwrap()
    }

    #[test]
    fn record_examples() {
        let mut l = CommLedger::new(link(1e6, 0.05)).unwrap();
        assert_eq!(l.record(0, 0, Direction::Activations, 0).sim_seconds, 0.05);
        let mut l = CommLedger::new(link(1e6, 0.0)).unwrap();
        assert_eq!(l.record(0, 0, Direction::Activations, 1_000_000).sim_seconds, 1.0);
    }

    #[test]
    fn parallel_vs_sequential() {
        let mut l = CommLedger::new(link(100.0, 0.0)).unwrap();
        l.record(3, 0, Direction::Activations, 100);
        l.record(3, 1, Direction::Activations, 300);
        assert_eq!(l.round_seconds(3, Aggregation::Parallel), 3.0);
        assert_eq!(l.round_seconds(3, Aggregation::Sequential), 4.0);
        assert_eq!(l.round_seconds(4, Aggregation::Parallel), 0.0);
    }

    #[test]
    fn directions_use_their_own_rate() {
        let mut l = CommLedger::new(LinkModel::new(10.0, 40.0, 0.0).unwrap()).unwrap();
        assert_eq!(l.record(0, 0, Direction::Activations, 20).sim_seconds, 2.0);
        assert_eq!(l.record(0, 0, Direction::Gradients, 20).sim_seconds, 0.5);
        assert_eq!(l.round_seconds(0, Aggregation::Parallel), 2.5);
    }

    #[test]
    fn entries_stay_ordered() {
        let mut l = CommLedger::new(link(1.0, 0.0)).unwrap();
        l.record(1, 0, Direction::Gradients, 1);
        l.record(0, 2, Direction::Activations, 2);
        l.record(1, 0, Direction::Activations, 3);
        l.record(0, 1, Direction::Gradients, 4);
        let keys: Vec<_> = l.entries().iter().map(|e| e.bytes).collect();
        assert_eq!(keys, vec![4, 2, 3, 1]);
        assert_eq!(l.total_bytes(), 10);
        assert_eq!(l.bytes_for(1, Direction::Activations), 3);
        assert_eq!(
            l.to_csv(),
            "round,device,direction,bytes,sim_seconds\n0,1,downlink,4,4\n0,2,uplink,2,2\n1,0,uplink,3,3\n1,0,downlink,1,1\n"
        );
    }

    #[test]
    fn invalid_links() {
        assert!(LinkModel::new(0.0, 1.0, 0.0).is_err());
        assert!(LinkModel::new(1.0, f64::INFINITY, 0.0).is_err());
        assert!(LinkModel::new(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn time_to_accuracy_examples() {
        let traj = [
            Progress { round: 0, accuracy: 0.3, seconds: 2.0 },
            Progress { round: 1, accuracy: 0.8, seconds: 2.0 },
            Progress { round: 2, accuracy: 0.7, seconds: 2.0 },
            Progress { round: 3, accuracy: 0.95, seconds: 2.0 },
        ];
        assert_eq!(time_to_accuracy(&traj, 0.75), TimeToAccuracy::Reached { seconds: 4.0, round: 1 });
        assert_eq!(time_to_accuracy(&traj, 0.9), TimeToAccuracy::Reached { seconds: 8.0, round: 3 });
        assert_eq!(time_to_accuracy(&traj, 0.99), TimeToAccuracy::NotReached);
        assert_eq!(time_to_accuracy(&[], 0.0), TimeToAccuracy::NotReached);
    }

    proptest! {
        #[test]
        fn relaxing_target_never_takes_longer(
            accs in prop::collection::vec(0.0f64..1.0, 1..30),
            secs in prop::collection::vec(0.0f64..5.0, 30),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let traj: Vec<Progress> = accs.iter().zip(&secs).enumerate()
                .map(|(i, (&accuracy, &seconds))| Progress { round: i as u32, accuracy, seconds })
                .collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(time_to_accuracy(&traj, lo).no_later_than(&time_to_accuracy(&traj, hi)));
        }

        #[test]
        fn halving_bytes_halves_bandwidth_time(
            sizes in prop::collection::vec(0u64..1_000_000, 1..20),
            rate in 1.0f64..1e7,
        ) {
            let run = |scale: u64| {
                let mut l = CommLedger::new(link(rate, 0.0)).unwrap();
                for (i, &s) in sizes.iter().enumerate() {
                    l.record(i as u32, 0, Direction::Activations, s * scale);
                }
                let traj: Vec<Progress> = (0..sizes.len() as u32)
                    .map(|r| Progress { round: r, accuracy: (r + 1) as f64 / sizes.len() as f64, seconds: l.round_seconds(r, Aggregation::Parallel) })
                    .collect();
                time_to_accuracy(&traj, 0.5).seconds().unwrap()
            };
            let full = run(2);
            let half = run(1);
            prop_assert!((full - 2.0 * half).abs() <= 1e-9 * full.max(1.0));
        }
    }
}
