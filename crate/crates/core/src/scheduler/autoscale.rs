use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscalePolicy {
    /// Scale up when the mean drop rate over the window exceeds this (msg/s).
    pub up_threshold: f64,
    /// Scale down when nothing dropped and mean buffer occupancy stays below
    /// this fraction for the whole window.
    pub down_threshold: f64,
    pub window_ms: u64,
    pub cooldown_ms: u64,
    pub max_replicas: u32,
}

impl Default for AutoscalePolicy {
    fn default() -> Self {
        AutoscalePolicy {
            up_threshold: 1.0,
            down_threshold: 0.25,
            window_ms: 10_000,
            cooldown_ms: 30_000,
            max_replicas: 8,
        }
    }
}

/// Aggregate metrics of one stream's replicas at one tick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickSample {
    pub t_ms: u64,
    /// Messages dropped since the previous sample.
    pub dropped: u64,
    pub buffered: u64,
    pub capacity: u64,
}

impl TickSample {
    fn occupancy(&self) -> f64 {
        if self.capacity == 0 {
            0.0
        } else {
            self.buffered as f64 / self.capacity as f64
        }
    }
}

#[derive(Debug, Default)]
struct StreamWindow {
    samples: VecDeque<TickSample>,
    /// Start of the current observation period (first sample or last change).
    since_ms: Option<u64>,
    last_change_ms: Option<u64>,
}

/// Per-stream scaling decisions. Each decision moves by at most one replica
/// and at most one change happens per cooldown.
#[derive(Debug, Default)]
pub struct Autoscaler {
    policy: AutoscalePolicy,
    streams: BTreeMap<String, StreamWindow>,
}

impl Autoscaler {
    pub fn new(policy: AutoscalePolicy) -> Self {
        Autoscaler {
            policy,
            streams: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> &AutoscalePolicy {
        &self.policy
    }

    /// Records `sample` and returns the target replica count.
    pub fn decide(&mut self, stream: &str, current: u32, sample: TickSample) -> u32 {
        let p = self.policy;
        let max = p.max_replicas.max(1);
        let current = current.clamp(1, max);
        let now = sample.t_ms;
        let w = self.streams.entry(stream.to_string()).or_default();
        let since = *w.since_ms.get_or_insert(now);
        w.samples.push_back(sample);
        while w.samples.front().is_some_and(|s| s.t_ms + p.window_ms <= now) {
            w.samples.pop_front();
        }

        let cooled = w.last_change_ms.is_none_or(|t| now.saturating_sub(t) >= p.cooldown_ms);
        let full = now.saturating_sub(since) >= p.window_ms;
        if !cooled || !full {
            return current;
        }

        let drops: u64 = w.samples.iter().map(|s| s.dropped).sum();
        let rate = drops as f64 / (p.window_ms as f64 / 1000.0);
        let occupancy = w.samples.iter().map(TickSample::occupancy).sum::<f64>() / w.samples.len() as f64;

        let target = if rate > p.up_threshold && current < max {
            current + 1
        } else if drops == 0 && occupancy < p.down_threshold && current > 1 {
            current - 1
        } else {
            current
        };
        if target != current {
            w.last_change_ms = Some(now);
            w.since_ms = Some(now);
            w.samples.clear();
        }
        target
    }

    pub fn forget(&mut self, stream: &str) {
        self.streams.remove(stream);
    }
}
