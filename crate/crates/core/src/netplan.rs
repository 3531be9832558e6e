//! Full-mesh planning: user pairs, frequency channels and TDM slots at the hub.
//!
//! Pairs are assigned round-robin: pair `k` in lexicographic order takes
//! channel `k mod C` and slot `k div C`, so slot usage differs by at most one
//! across channels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetplanError {
    #[error("a network needs at least 2 users, got {0}")]
    TooFewUsers(usize),
    #[error("invalid network spec: {0}")]
    InvalidSpec(&'static str),
    #[error("{pairs} pairs do not fit {channels} channels x {tdm_slots} slots; needs {slots_needed} slots")]
    Infeasible {
        pairs: usize,
        channels: usize,
        tdm_slots: usize,
        slots_needed: usize,
    },
    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub users: usize,
    pub channels: usize,
    pub tdm_slots: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NetplanError> {
        if self.users < 2 {
            return Err(NetplanError::TooFewUsers(self.users));
        }
        if self.channels == 0 || self.tdm_slots == 0 {
            return Err(NetplanError::InvalidSpec(
                "channels and tdm_slots must be >= 1",
            ));
        }
        Ok(())
    }

    /// Smallest slot count that fits every pair.
    pub fn slots_needed(&self) -> usize {
        pair_count(self.users).div_ceil(self.channels.max(1))
    }
}

/// `N(N−1)/2`.
pub fn pair_count(users: usize) -> usize {
    users * users.saturating_sub(1) / 2
}

/// Unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn enumerate_pairs(users: usize) -> Result<impl Iterator<Item = (usize, usize)>, NetplanError> {
    if users < 2 {
        return Err(NetplanError::TooFewUsers(users));
    }
    Ok((0..users).flat_map(move |i| (i + 1..users).map(move |j| (i, j))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub users: (usize, usize),
    pub channel: usize,
    pub slot: usize,
    /// Fraction of frame time the pair holds its channel.
    pub duty_cycle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub spec: NetworkSpec,
    pub assignments: Vec<Assignment>,
}

impl Allocation {
    /// Number of slots occupied on each channel.
    pub fn slots_used(&self) -> Vec<usize> {
        let mut used = vec![0; self.spec.channels];
        for a in &self.assignments {
            used[a.channel] += 1;
        }
        used
    }

    /// Checks the bijection, balance and duty-cycle invariants.
    pub fn validate(&self) -> Result<(), NetplanError> {
        let spec = self.spec;
        spec.validate()?;
        let bad = |m: String| Err(NetplanError::InvalidAllocation(m));
        if self.assignments.len() != pair_count(spec.users) {
            return bad(format!(
                "{} assignments for {} pairs",
                self.assignments.len(),
                pair_count(spec.users)
            ));
        }
        let mut cells = vec![false; spec.channels * spec.tdm_slots];
        let mut pairs = vec![false; spec.users * spec.users];
        for a in &self.assignments {
            let (i, j) = a.users;
            if !(i < j && j < spec.users) {
                return bad(format!("pair {:?} is not an ordered user pair", a.users));
            }
            if a.channel >= spec.channels || a.slot >= spec.tdm_slots {
                return bad(format!("pair {:?} assigned outside the grid", a.users));
            }
            let cell = a.channel * spec.tdm_slots + a.slot;
            if std::mem::replace(&mut cells[cell], true) {
                return bad(format!(
                    "channel {} slot {} assigned twice",
                    a.channel, a.slot
                ));
            }
            if std::mem::replace(&mut pairs[i * spec.users + j], true) {
                return bad(format!("pair {:?} assigned twice", a.users));
            }
        }
        let used = self.slots_used();
        let busy = used.iter().filter(|&&u| u > 0);
        let (lo, hi) = (
            used.iter().min().copied().unwrap_or(0),
            busy.max().copied().unwrap_or(0),
        );
        if hi > lo + 1 {
            return bad(format!("unbalanced channels: {lo}..{hi} slots used"));
        }
        for a in &self.assignments {
            if a.duty_cycle != 1.0 / self.spec.slots_needed() as f64 {
                return bad(format!(
                    "pair {:?} has duty cycle {}",
                    a.users, a.duty_cycle
                ));
            }
        }
        Ok(())
    }

    /// Relabels users by `perm` (user `u` becomes `perm[u]`), keeping every cell.
    pub fn relabel(&self, perm: &[usize]) -> Result<Allocation, NetplanError> {
        let n = self.spec.users;
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(NetplanError::InvalidAllocation(
                "relabeling is not a permutation of the users".into(),
            ));
        }
        let assignments = self
            .assignments
            .iter()
            .map(|a| {
                let (x, y) = (perm[a.users.0], perm[a.users.1]);
                Assignment {
                    users: (x.min(y), x.max(y)),
                    ..*a
                }
            })
            .collect();
        Ok(Allocation {
            spec: self.spec,
            assignments,
        })
    }

    pub fn find(&self, i: usize, j: usize) -> Option<&Assignment> {
        let key = (i.min(j), i.max(j));
        self.assignments.iter().find(|a| a.users == key)
    }

    /// Fixed-width text table, one row per pair.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>6} {:>8} {:>6} {:>10}\n",
            "user_a", "user_b", "channel", "slot", "duty"
        );
        for a in &self.assignments {
            out.push_str(&format!(
                "{:>6} {:>6} {:>8} {:>6} {:>10.6}\n",
                a.users.0, a.users.1, a.channel, a.slot, a.duty_cycle
            ));
        }
        out
    }
}

/// Round-robin allocation of every pair onto the channel × slot grid.
pub fn allocate(spec: &NetworkSpec) -> Result<Allocation, NetplanError> {
    spec.validate()?;
    let pairs = pair_count(spec.users);
    let slots_needed = spec.slots_needed();
    if slots_needed > spec.tdm_slots {
        return Err(NetplanError::Infeasible {
            pairs,
            channels: spec.channels,
            tdm_slots: spec.tdm_slots,
            slots_needed,
        });
    }
    let c = spec.channels;
    // every channel runs the same frame, so each pair holds one slot in `slots_needed`
    let duty_cycle = 1.0 / slots_needed as f64;
    let assignments = enumerate_pairs(spec.users)?
        .enumerate()
        .map(|(k, users)| {
            let channel = k % c;
            Assignment {
                users,
                channel,
                slot: k / c,
                duty_cycle,
            }
        })
        .collect();
    Ok(Allocation {
        spec: *spec,
        assignments,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRate {
    pub users: (usize, usize),
    pub channel: usize,
    pub slot: usize,
    pub duty_cycle: f64,
    pub raw_rate_bps: f64,
    pub effective_rate_bps: f64,
}

/// How frequency channels map to users: each channel carries one pair at a
/// time and pairs beyond the channel count share channels through TDM.
pub const CHANNEL_USE: &str = "one frequency channel per active pair, TDM across pairs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkReport {
    pub spec: NetworkSpec,
    /// Channel-use interpretation the report was computed under.
    pub channel_use: String,
    pub pairs: Vec<PairRate>,
    pub mean_rate_bps: f64,
    pub min_rate_bps: f64,
    pub max_rate_bps: f64,
    pub aggregate_rate_bps: f64,
    /// Channel count times the largest raw rate.
    pub capacity_bound_bps: f64,
    pub feasible: bool,
    /// True when every pair holds a channel for the whole frame.
    pub full_duty: bool,
}

impl NetworkReport {
    pub fn capacity_respected(&self) -> bool {
        self.aggregate_rate_bps <= self.capacity_bound_bps
    }
}

/// Report with the same raw per-channel rate on every pair.
pub fn network_report(allocation: &Allocation, raw_rate_per_channel_bps: f64) -> NetworkReport {
    network_report_with(allocation, |_| raw_rate_per_channel_bps)
}

/// Report with a per-pair raw rate, evaluated in parallel.
pub fn network_report_with(
    allocation: &Allocation,
    raw_rate: impl Fn(&Assignment) -> f64 + Sync,
) -> NetworkReport {
    let pairs: Vec<PairRate> = allocation
        .assignments
        .par_iter()
        .map(|a| {
            let raw = raw_rate(a);
            PairRate {
                users: a.users,
                channel: a.channel,
                slot: a.slot,
                duty_cycle: a.duty_cycle,
                raw_rate_bps: raw,
                effective_rate_bps: raw * a.duty_cycle,
            }
        })
        .collect();
    let n = pairs.len().max(1) as f64;
    let rates = || pairs.iter().map(|p| p.effective_rate_bps);
    // per-channel sums divided once, so no channel exceeds its raw rate through rounding
    let frame = allocation.spec.slots_needed() as f64;
    let mut per_channel = vec![0.0; allocation.spec.channels];
    for p in &pairs {
        per_channel[p.channel] += p.raw_rate_bps;
    }
    let aggregate_rate_bps: f64 = per_channel.iter().map(|r| r / frame).sum();
    let max_raw = pairs.iter().map(|p| p.raw_rate_bps).fold(0.0, f64::max);
    NetworkReport {
        spec: allocation.spec,
        channel_use: CHANNEL_USE.to_string(),
        mean_rate_bps: aggregate_rate_bps / n,
        min_rate_bps: rates().fold(f64::INFINITY, f64::min),
        max_rate_bps: rates().fold(0.0, f64::max),
        aggregate_rate_bps,
        capacity_bound_bps: allocation.spec.channels as f64 * max_raw,
        feasible: true,
        full_duty: pairs.iter().all(|p| p.duty_cycle == 1.0),
        pairs,
    }
}
