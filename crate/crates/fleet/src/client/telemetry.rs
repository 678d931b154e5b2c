//! Synthetic telemetry. Equal seeds give equal streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SignalKind;

/// Starting level of the random walk.
const WALK_START: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct TelemetrySource {
    signal: SignalKind,
    rng: ChaCha8Rng,
    level: f64,
    produced: u64,
}

impl TelemetrySource {
    pub fn new(seed: u64, signal: SignalKind) -> Self {
        Self {
            signal,
            rng: ChaCha8Rng::seed_from_u64(seed),
            level: WALK_START,
            produced: 0,
        }
    }

    pub fn produced(&self) -> u64 {
        self.produced
    }

    pub fn next_value(&mut self) -> f64 {
        self.produced += 1;
        match self.signal {
            SignalKind::Ramp => self.produced as f64,
            SignalKind::Walk => {
                self.level += self.rng.random_range(-1.0..=1.0);
                self.level
            }
        }
    }

    pub fn take(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_value()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = TelemetrySource::new(7, SignalKind::Walk).take(500);
        let b = TelemetrySource::new(7, SignalKind::Walk).take(500);
        let c = TelemetrySource::new(8, SignalKind::Walk).take(500);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| (w[1] - w[0]).abs() <= 1.0));
    }

    #[test]
    fn ramp_counts_from_one() {
        let mut s = TelemetrySource::new(99, SignalKind::Ramp);
        assert_eq!(s.take(4), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.produced(), 4);
    }
}
