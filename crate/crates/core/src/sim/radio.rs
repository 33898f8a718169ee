use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_RANGE_M: f64 = 200.0;

/// Why a broadcast did not reach a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered,
    OutOfRange,
    Dropped,
}

/// Range-limited broadcast medium with an optional seeded loss draw.
#[derive(Debug, Clone)]
pub struct RadioChannel {
    positions: BTreeMap<u16, (f64, f64)>,
    range_m: f64,
    drop_probability: f64,
    rng: ChaCha8Rng,
}

impl RadioChannel {
    pub fn new(range_m: f64, drop_probability: f64, seed: u64) -> Self {
        Self { positions: BTreeMap::new(), range_m, drop_probability, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn place(&mut self, id: u16, position: (f64, f64)) {
        self.positions.insert(id, position);
    }

    pub fn distance(&self, a: u16, b: u16) -> Option<f64> {
        let (pa, pb) = (self.positions.get(&a)?, self.positions.get(&b)?);
        Some((pa.0 - pb.0).hypot(pa.1 - pb.1))
    }

    /// Outcome for every other device, in id order. A loss draw is taken
    /// only for in-range receivers, and only when the drop probability is
    /// positive.
    pub fn broadcast(&mut self, sender: u16) -> Vec<(u16, Delivery)> {
        let ids: Vec<u16> = self.positions.keys().copied().filter(|&id| id != sender).collect();
        ids.into_iter()
            .map(|id| {
                let d = self.distance(sender, id).expect("placed");
                let outcome = if d > self.range_m {
                    Delivery::OutOfRange
                } else if self.drop_probability > 0.0 && self.rng.random::<f64>() < self.drop_probability {
                    Delivery::Dropped
                } else {
                    Delivery::Delivered
                };
                (id, outcome)
            })
            .collect()
    }
}
