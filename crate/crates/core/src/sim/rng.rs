//! Seeded random streams. Every (node, purpose) pair gets its own ChaCha8
//! stream derived from the scenario seed, so adding draws for one node never
//! shifts another node's sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LatencyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Round trip of a leader-to-node data message.
    RoundTrip,
    /// One-way delay of control traffic (ack updates, heartbeats).
    Control,
    /// Message contents.
    Payload,
    /// Leader-side randomness such as copy-target choice.
    Leader,
    /// Test-harness choices (pruning interleavings, crash timing).
    Harness,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::RoundTrip => 0,
            Purpose::Control => 1,
            Purpose::Payload => 2,
            Purpose::Leader => 3,
            Purpose::Harness => 4,
        }
    }
}

pub fn stream(seed: u64, node: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((node as u64) << 8 | purpose.code());
    rng
}

/// Draws latencies in milliseconds from one stream.
#[derive(Debug, Clone)]
pub struct LatencySampler {
    dist: Normal<f64>,
    rng: ChaCha8Rng,
}

impl LatencySampler {
    pub fn new(model: LatencyModel, rng: ChaCha8Rng) -> Self {
        let dist = Normal::new(model.mean_ms, model.stddev_ms)
            .expect("latency model validated as finite and non-negative");
        Self { dist, rng }
    }

    pub fn sample_ms(&mut self) -> f64 {
        self.dist.sample(&mut self.rng).max(LatencyModel::FLOOR_MS)
    }

    /// A draw converted to integer nanoseconds of virtual time.
    pub fn sample_ns(&mut self) -> u64 {
        ms_to_ns(self.sample_ms())
    }
}

pub fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Uniform bytes for a message body.
pub fn fill_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}
