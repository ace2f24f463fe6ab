//! Seeded random scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::NodeId;
use crate::scenario::{Action, Scenario};
use crate::sim::net::DelayModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzOptions {
    pub min_n: usize,
    pub max_n: usize,
    pub max_messages: usize,
    pub max_rounds: usize,
    /// Chance that a scenario contains one crash.
    pub crash_chance: f64,
    /// Chance that nodes are grouped for TMR (only with n >= 3).
    pub tmr_chance: f64,
    pub max_drop: f64,
    pub max_duplicate: f64,
    pub max_delay: u64,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions {
            min_n: 2,
            max_n: 6,
            max_messages: 20,
            max_rounds: 3,
            crash_chance: 0.5,
            tmr_chance: 0.3,
            max_drop: 0.1,
            max_duplicate: 0.2,
            max_delay: 5,
        }
    }
}

/// Builds the scenario for `seed`. A closing round after all scripted
/// activity makes sure the last interval is committed.
pub fn random_scenario(seed: u64, opts: &FuzzOptions) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(opts.min_n..=opts.max_n);
    let mut sc = Scenario::new(n);

    let hi = rng.gen_range(1..=opts.max_delay.max(1));
    sc.net.delay = if rng.gen_bool(0.2) {
        DelayModel::Fixed(hi)
    } else {
        DelayModel::Uniform { lo: 1, hi }
    };
    sc.net.drop_rate = round3(rng.gen_range(0.0..=opts.max_drop));
    sc.net.duplicate_rate = round3(rng.gen_range(0.0..=opts.max_duplicate));
    sc.net.ack_timeout = 2 * hi + 2;
    sc.net.retry_limit = 8;
    sc.net.seed = rng.gen();
    sc.detection_latency = rng.gen_range(1..=3 * hi);

    let horizon = 40 * hi;
    if n >= 3 && rng.gen_bool(opts.tmr_chance) {
        let mut groups = Vec::new();
        for base in (0..n as u32).step_by(3) {
            if base + 2 < n as u32 {
                groups.push([NodeId(base), NodeId(base + 1), NodeId(base + 2)]);
            }
        }
        sc.groups = groups;
    }

    let messages = rng.gen_range(0..=opts.max_messages);
    for _ in 0..messages {
        let from = rng.gen_range(0..n as u32);
        let mut to = rng.gen_range(0..n as u32 - 1);
        if to >= from {
            to += 1;
        }
        let at = rng.gen_range(1..horizon);
        sc = sc.send(at, from, to);
    }
    let rounds = rng.gen_range(0..=opts.max_rounds);
    for _ in 0..rounds {
        let at = rng.gen_range(1..horizon);
        sc = sc.at(at, Action::Round);
    }
    if rng.gen_bool(opts.crash_chance) {
        let node = rng.gen_range(0..n as u32);
        let at = rng.gen_range(1..horizon);
        sc = sc.at(at, Action::Crash(NodeId(node)));
    }
    sc.at(horizon + 20 * hi, Action::Round)
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
