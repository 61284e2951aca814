use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Jitter as a fraction of the base step, at most 0.5.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay_ms: 1_000,
            max_delay_ms: 30_000,
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    pub fn no_retries() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    pub fn fast(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 1,
            max_delay_ms: 20,
            jitter: 0.5,
        }
    }
}

/// Delays for consecutive retries of one request: `base * 2^n`, capped, with
/// additive jitter of at most ±`jitter * base`. Never decreasing.
#[derive(Debug)]
pub struct BackoffSchedule {
    policy: RetryPolicy,
    step: u32,
    previous: Duration,
}

impl BackoffSchedule {
    pub fn new(policy: RetryPolicy) -> Self {
        Self {
            policy,
            step: 0,
            previous: Duration::ZERO,
        }
    }

    pub fn next_delay(&mut self) -> Duration {
        self.next_delay_with(&mut rand::rng())
    }

    pub fn next_delay_with<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Duration {
        let base = self.policy.base_delay_ms as f64;
        let cap = self.policy.max_delay_ms as f64;
        let nominal = (base * 2f64.powi(self.step.min(30) as i32)).min(cap);
        let jitter = self.policy.jitter.clamp(0.0, 0.5);
        let offset = if jitter > 0.0 {
            rng.random_range(-jitter..=jitter) * base
        } else {
            0.0
        };
        let millis = (nominal + offset).clamp(0.0, cap);
        let delay = Duration::from_secs_f64(millis / 1_000.0).max(self.previous);
        self.step += 1;
        self.previous = delay;
        delay
    }
}
