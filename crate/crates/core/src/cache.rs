//! Data cache model for Flush+Reload.
//!
//! Only per-line hot/cold state is tracked. It is the one piece of state
//! that transient execution leaves behind after a squash.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_LINE_SIZE: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("latencies must satisfy hit < threshold < miss (got {hit} / {threshold} / {miss})")]
    LatencyOrder { hit: u32, threshold: u32, miss: u32 },
    #[error("noise probability {0} is outside [0, 1]")]
    NoiseProbability(f64),
    #[error("line size {0} is not a power of two")]
    LineSize(u64),
}

/// Outcome of comparing a probe latency against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    Hit,
    Miss,
}

/// Reported reload latencies and the eviction noise applied to probe lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub hit_cycles: u32,
    pub miss_cycles: u32,
    pub threshold_cycles: u32,
    pub noise_eviction_probability: f64,
    pub seed: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            hit_cycles: 40,
            miss_cycles: 200,
            threshold_cycles: 120,
            noise_eviction_probability: 0.0,
            seed: 0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), CacheError> {
        if !(self.hit_cycles < self.threshold_cycles && self.threshold_cycles < self.miss_cycles) {
            return Err(CacheError::LatencyOrder {
                hit: self.hit_cycles,
                threshold: self.threshold_cycles,
                miss: self.miss_cycles,
            });
        }
        if !(0.0..=1.0).contains(&self.noise_eviction_probability) {
            return Err(CacheError::NoiseProbability(
                self.noise_eviction_probability,
            ));
        }
        Ok(())
    }

    pub fn classify(&self, latency: u32) -> Access {
        if latency < self.threshold_cycles {
            Access::Hit
        } else {
            Access::Miss
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheState {
    line_size: u64,
    hot: BTreeSet<u64>,
    latency: LatencyModel,
    rng: ChaCha8Rng,
}

impl Default for CacheState {
    fn default() -> Self {
        CacheState::new(DEFAULT_LINE_SIZE, LatencyModel::default()).expect("default cache is valid")
    }
}

impl CacheState {
    pub fn new(line_size: u64, latency: LatencyModel) -> Result<CacheState, CacheError> {
        if !line_size.is_power_of_two() {
            return Err(CacheError::LineSize(line_size));
        }
        latency.validate()?;
        Ok(CacheState {
            line_size,
            hot: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(latency.seed),
            latency,
        })
    }

    pub fn line_size(&self) -> u64 {
        self.line_size
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn line_of(&self, address: u64) -> u64 {
        address / self.line_size
    }

    pub fn is_hot(&self, address: u64) -> bool {
        self.hot.contains(&self.line_of(address))
    }

    pub fn flush(&mut self, address: u64) {
        let line = self.line_of(address);
        self.hot.remove(&line);
    }

    pub fn touch(&mut self, address: u64) {
        let line = self.line_of(address);
        self.hot.insert(line);
    }

    /// Timed reload: reports the latency, then leaves the line hot.
    pub fn probe(&mut self, address: u64) -> u32 {
        let line = self.line_of(address);
        if self.hot.insert(line) {
            self.latency.miss_cycles
        } else {
            self.latency.hit_cycles
        }
    }

    pub fn classify(&self, latency: u32) -> Access {
        self.latency.classify(latency)
    }

    /// Evicts each hot line overlapping `region` independently with the
    /// configured probability. Lines are visited in address order so the
    /// outcome depends only on the seed and the hot set.
    pub fn apply_noise(&mut self, region: Range<u64>) -> usize {
        let p = self.latency.noise_eviction_probability;
        if p <= 0.0 || region.is_empty() {
            return 0;
        }
        let first = self.line_of(region.start);
        let last = self.line_of(region.end - 1);
        let candidates: Vec<u64> = self.hot.range(first..=last).copied().collect();
        let mut evicted = 0;
        for line in candidates {
            if self.rng.gen_bool(p) {
                self.hot.remove(&line);
                evicted += 1;
            }
        }
        evicted
    }

    pub fn hot_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.hot.iter().copied()
    }

    pub fn clear(&mut self) {
        self.hot.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MEM: u64 = 0x10_0000;

    #[test]
    fn flush_then_probe_misses() {
        let mut c = CacheState::default();
        c.touch(MEM + 64);
        c.flush(MEM + 64);
        assert_eq!(c.probe(MEM + 64), 200);
    }

    #[test]
    fn flush_is_idempotent() {
        let mut c = CacheState::default();
        c.flush(MEM);
        c.flush(MEM);
        assert_eq!(c.hot_lines().count(), 0);
    }

    #[test]
    fn touch_and_probe_hit() {
        let mut c = CacheState::default();
        c.touch(MEM);
        c.touch(MEM);
        assert_eq!(c.hot_lines().count(), 1);
        assert_eq!(c.probe(MEM), 40);
        assert_eq!(c.classify(40), Access::Hit);
        assert_eq!(c.classify(200), Access::Miss);
    }

    #[test]
    fn probe_leaves_line_hot() {
        let mut c = CacheState::default();
        assert_eq!(c.probe(MEM), 200);
        assert_eq!(c.probe(MEM), 40);
    }

    // Every address inside one line aliases; the first address of the
    // next line does not.
    #[test]
    fn line_granularity_enumerated() {
        for offset in 0..64 {
            let mut c = CacheState::default();
            c.touch(MEM + 64);
            c.flush(MEM + 64 + offset);
            assert_eq!(c.probe(MEM + 64), 200, "flush offset {offset}");

            let mut c = CacheState::default();
            c.touch(MEM + 64 + offset);
            assert_eq!(c.probe(MEM + 64), 40, "touch offset {offset}");
        }
        let mut c = CacheState::default();
        c.touch(MEM + 128);
        assert_eq!(c.probe(MEM + 64), 200);
    }

    #[test]
    fn latency_model_validation() {
        let bad = LatencyModel {
            threshold_cycles: 300,
            ..LatencyModel::default()
        };
        assert!(matches!(
            CacheState::new(64, bad),
            Err(CacheError::LatencyOrder { .. })
        ));
        let bad = LatencyModel {
            noise_eviction_probability: 1.5,
            ..LatencyModel::default()
        };
        assert!(CacheState::new(64, bad).is_err());
        assert!(CacheState::new(48, LatencyModel::default()).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_region_bound() {
        let latency = LatencyModel {
            noise_eviction_probability: 0.5,
            seed: 9,
            ..LatencyModel::default()
        };
        let run = || {
            let mut c = CacheState::new(64, latency).unwrap();
            for i in 0..64 {
                c.touch(MEM + 64 * i);
            }
            c.touch(0x9000);
            c.apply_noise(MEM..MEM + 64 * 64);
            assert!(c.is_hot(0x9000));
            c.hot_lines().collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.len() > 1 && a.len() < 65);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Touch(u64),
        Flush(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..1024).prop_map(Op::Touch),
            (0u64..1024).prop_map(Op::Flush),
        ]
    }

    proptest! {
        // Brute-force replay: a line is hot iff the last touch/flush to any
        // address in that line was a touch.
        #[test]
        fn probe_matches_replay_oracle(ops in prop::collection::vec(op(), 0..200), target in 0u64..1024) {
            let mut c = CacheState::default();
            for op in &ops {
                match *op {
                    Op::Touch(a) => c.touch(a),
                    Op::Flush(a) => c.flush(a),
                }
            }
            let expected_hot = ops.iter().rev().find_map(|op| match *op {
                Op::Touch(a) if a / 64 == target / 64 => Some(true),
                Op::Flush(a) if a / 64 == target / 64 => Some(false),
                _ => None,
            }).unwrap_or(false);
            let latency = c.probe(target);
            prop_assert_eq!(latency < c.latency().threshold_cycles, expected_hot);
        }
    }
}
