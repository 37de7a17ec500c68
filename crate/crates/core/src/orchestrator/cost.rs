//! Simulated client instances and their running cost.

use crate::config::CostConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instance {
    Up { since: f64 },
    Down,
}

/// A shutdown of a client instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Termination {
    pub round: u32,
    pub client_id: u32,
    pub at: f64,
}

/// Per-client instance state and billed up-time.
///
/// Every instance is up from time zero. A shut-down instance charges
/// nothing until it is selected again, when it pays `spin_up_time_sec` once
/// and is up from the start of that round.
#[derive(Debug, Clone)]
pub struct SimClock {
    now: f64,
    instances: Vec<Instance>,
    up_time: Vec<f64>,
    spin_ups: Vec<u32>,
    terminations: Vec<Termination>,
}

impl SimClock {
    pub fn new(clients: u32) -> Self {
        let m = clients as usize;
        Self {
            now: 0.0,
            instances: vec![Instance::Up { since: 0.0 }; m],
            up_time: vec![0.0; m],
            spin_ups: vec![0; m],
            terminations: Vec::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Moves the clock forward; earlier times are ignored.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn is_up(&self, client_id: u32) -> bool {
        matches!(self.instances[client_id as usize], Instance::Up { .. })
    }

    /// Brings a selected client's instance up for a round starting at `at`.
    pub fn participate(&mut self, client_id: u32, at: f64) {
        let i = client_id as usize;
        if self.instances[i] == Instance::Down {
            self.instances[i] = Instance::Up { since: at };
            self.spin_ups[i] += 1;
        }
    }

    pub fn terminate(&mut self, round: u32, client_id: u32, at: f64) {
        let i = client_id as usize;
        if let Instance::Up { since } = self.instances[i] {
            self.up_time[i] += (at - since).max(0.0);
            self.instances[i] = Instance::Down;
            self.terminations.push(Termination { round, client_id, at });
        }
    }

    pub fn terminations(&self) -> &[Termination] {
        &self.terminations
    }

    /// Closes every running instance at `end` and returns per-client cost.
    pub fn settle(&mut self, end: f64, cost: &CostConfig) -> Vec<f64> {
        for i in 0..self.instances.len() {
            if let Instance::Up { since } = self.instances[i] {
                self.up_time[i] += (end - since).max(0.0);
                self.instances[i] = Instance::Up { since: end };
            }
        }
        (0..self.instances.len())
            .map(|i| {
                let billed = self.up_time[i] + self.spin_ups[i] as f64 * cost.spin_up_time_sec;
                cost.price_per_sec.get(i as u32) * billed
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn always_up_pays_for_the_whole_run() {
        let mut c = SimClock::new(2);
        let cfg = CostConfig::default();
        assert_eq!(c.settle(10.0, &cfg), vec![10.0, 10.0]);
    }

    #[test]
    fn shutdown_and_spin_up() {
        let cfg = CostConfig { spin_up_time_sec: 2.0, ..CostConfig::default() };
        let mut c = SimClock::new(1);
        c.terminate(0, 0, 1.0);
        assert!(!c.is_up(0));
        c.terminate(0, 0, 1.5);
        c.participate(0, 10.0);
        c.participate(0, 10.0);
        assert!(c.is_up(0));
        c.terminate(1, 0, 11.0);
        // 1 s + 1 s of up-time plus one spin-up
        assert_eq!(c.settle(20.0, &cfg), vec![4.0]);
        assert_eq!(c.terminations().len(), 2);
    }

    #[test]
    fn clock_never_goes_back() {
        let mut c = SimClock::new(1);
        c.advance_to(5.0);
        c.advance_to(3.0);
        assert_eq!(c.now(), 5.0);
    }
}
