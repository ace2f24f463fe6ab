//! Network model and the deterministic event queue.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayModel {
    Fixed(u64),
    /// Inclusive range.
    Uniform {
        lo: u64,
        hi: u64,
    },
}

impl DelayModel {
    pub fn max(&self) -> u64 {
        match *self {
            DelayModel::Fixed(d) => d,
            DelayModel::Uniform { hi, .. } => hi,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            DelayModel::Fixed(d) => d,
            DelayModel::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub delay: DelayModel,
    pub drop_rate: f64,
    pub duplicate_rate: f64,
    pub ack_timeout: u64,
    pub retry_limit: u32,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            delay: DelayModel::Fixed(1),
            drop_rate: 0.0,
            duplicate_rate: 0.0,
            ack_timeout: 4,
            retry_limit: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("{name} must lie in [0, 1), got {value}")]
    Probability { name: &'static str, value: String },
    #[error("ack timeout {timeout} must exceed the maximum delay {max}")]
    Timeout { timeout: u64, max: u64 },
    #[error("uniform delay needs lo <= hi, got {lo}..{hi}")]
    EmptyRange { lo: u64, hi: u64 },
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        for (name, value) in [("drop", self.drop_rate), ("duplicate", self.duplicate_rate)] {
            if !(0.0..1.0).contains(&value) {
                return Err(NetError::Probability {
                    name,
                    value: value.to_string(),
                });
            }
        }
        if let DelayModel::Uniform { lo, hi } = self.delay {
            if lo > hi {
                return Err(NetError::EmptyRange { lo, hi });
            }
        }
        if self.ack_timeout <= self.delay.max() {
            return Err(NetError::Timeout {
                timeout: self.ack_timeout,
                max: self.delay.max(),
            });
        }
        Ok(())
    }
}

/// Sampled fate of one transmission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    /// Arrival times of the copies that reach the receiver.
    pub deliveries: Vec<u64>,
    pub dropped: bool,
    pub duplicated: bool,
    /// When the sender gives up waiting for the acknowledgement.
    pub timeout: u64,
}

/// Decides whether a packet sent at `now` is dropped or duplicated and
/// when each copy arrives. Random draws happen in a fixed order.
pub fn transmit(cfg: &NetConfig, rng: &mut ChaCha8Rng, now: u64) -> Transmission {
    let dropped = rng.gen::<f64>() < cfg.drop_rate;
    let duplicated = !dropped && rng.gen::<f64>() < cfg.duplicate_rate;
    let copies = match (dropped, duplicated) {
        (true, _) => 0,
        (false, true) => 2,
        (false, false) => 1,
    };
    let deliveries = (0..copies).map(|_| now + cfg.delay.sample(rng)).collect();
    Transmission {
        deliveries,
        dropped,
        duplicated,
        timeout: now + cfg.ack_timeout,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event at {at} scheduled in the past (now {now})")]
pub struct ScheduleError {
    pub at: u64,
    pub now: u64,
}

/// Events ordered by time, then by insertion.
#[derive(Debug, Clone)]
pub struct EventQueue<E> {
    now: u64,
    next_seq: u64,
    events: BTreeMap<(u64, u64), E>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            now: 0,
            next_seq: 0,
            events: BTreeMap::new(),
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn schedule(&mut self, at: u64, event: E) -> Result<(), ScheduleError> {
        if at < self.now {
            return Err(ScheduleError { at, now: self.now });
        }
        self.events.insert((at, self.next_seq), event);
        self.next_seq += 1;
        Ok(())
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        let ((at, _), e) = self.events.pop_first()?;
        self.now = at;
        Some((at, e))
    }

    /// Keeps only events for which `keep` holds; returns how many were removed.
    pub fn retain(&mut self, mut keep: impl FnMut(&E) -> bool) -> usize {
        let before = self.events.len();
        self.events.retain(|_, e| keep(e));
        before - self.events.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &E)> {
        self.events.iter().map(|((t, _), e)| (*t, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn equal_times_keep_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(5, "from node 2").unwrap();
        q.schedule(5, "from node 1").unwrap();
        q.schedule(3, "earlier").unwrap();
        assert_eq!(q.pop(), Some((3, "earlier")));
        assert_eq!(q.pop(), Some((5, "from node 2")));
        assert_eq!(q.pop(), Some((5, "from node 1")));
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn past_event_rejected() {
        let mut q = EventQueue::new();
        q.schedule(10, ()).unwrap();
        q.pop();
        assert_eq!(q.schedule(9, ()), Err(ScheduleError { at: 9, now: 10 }));
        assert!(q.schedule(10, ()).is_ok());
    }

    #[test]
    fn fixed_delay_arithmetic() {
        let cfg = NetConfig {
            delay: DelayModel::Fixed(3),
            ..NetConfig::default()
        };
        let t = transmit(&cfg, &mut rng(), 10);
        assert_eq!(t.deliveries, vec![13]);
        assert_eq!(t.timeout, 10 + cfg.ack_timeout);
    }

    #[test]
    fn loss_and_duplication_boundaries() {
        let reliable = NetConfig::default();
        let t = transmit(&reliable, &mut rng(), 0);
        assert_eq!(t.deliveries.len(), 1);
        assert!(!t.dropped && !t.duplicated);

        let lossy = NetConfig {
            drop_rate: 1.0,
            ..NetConfig::default()
        };
        let mut r = rng();
        for _ in 0..20 {
            let t = transmit(&lossy, &mut r, 0);
            assert!(t.dropped && t.deliveries.is_empty());
        }

        let dup = NetConfig {
            duplicate_rate: 1.0,
            ..NetConfig::default()
        };
        assert_eq!(transmit(&dup, &mut rng(), 0).deliveries.len(), 2);
    }

    #[test]
    fn uniform_delay_within_bounds() {
        let cfg = NetConfig {
            delay: DelayModel::Uniform { lo: 2, hi: 5 },
            ack_timeout: 12,
            ..NetConfig::default()
        };
        let mut r = rng();
        for _ in 0..200 {
            let d = transmit(&cfg, &mut r, 100).deliveries[0];
            assert!((102..=105).contains(&d));
        }
    }

    #[test]
    fn validation() {
        assert!(NetConfig::default().validate().is_ok());
        let bad = NetConfig {
            drop_rate: 1.0,
            ..NetConfig::default()
        };
        assert!(matches!(bad.validate(), Err(NetError::Probability { .. })));
        let slow = NetConfig {
            delay: DelayModel::Fixed(4),
            ack_timeout: 4,
            ..NetConfig::default()
        };
        assert!(matches!(slow.validate(), Err(NetError::Timeout { .. })));
    }
}
