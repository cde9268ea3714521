//! Counter-based RowHammer mitigations.
//!
//! Each tracker watches the ACT stream of one bank and, once a row (or a
//! group of rows) reaches the maximum activate count `t_mac`, issues a
//! Nearby Row Refresh that restores the victims next to it.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::attack::AttackConfig;
use crate::dram::RowId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MacPolicy {
    /// The module claims to withstand any number of ACTs.
    Unlimited,
    /// The vendor never characterised a limit.
    Untested,
    Limit(u64),
}

impl MacPolicy {
    pub fn threshold(self) -> Option<u64> {
        match self {
            MacPolicy::Limit(t) => Some(t),
            _ => None,
        }
    }
}

impl fmt::Display for MacPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MacPolicy::Unlimited => f.write_str("unlimited"),
            MacPolicy::Untested => f.write_str("untested"),
            MacPolicy::Limit(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for MacPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unlimited" => Ok(MacPolicy::Unlimited),
            "untested" => Ok(MacPolicy::Untested),
            v => {
                let t = crate::config::parse_hc(v, "t_mac")?;
                if t == 0 {
                    return Err(Error::Config("t_mac must be at least 1".into()));
                }
                Ok(MacPolicy::Limit(t))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DefenseKind {
    /// One exact counter per row.
    PerRowCounter,
    /// One counter per aligned group of `group_size` rows.
    GroupCounter { group_size: u32 },
    /// Misra-Gries summary with `num_counters` slots.
    FrequentItem { num_counters: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub policy: MacPolicy,
    /// Clear a counter after it triggers an NRR.
    pub reset_on_nrr: bool,
}

impl DefenseConfig {
    pub fn new(kind: DefenseKind, policy: MacPolicy) -> Result<Self> {
        match kind {
            DefenseKind::GroupCounter { group_size: 0 } => {
                return Err(Error::Config("group_size must be at least 1".into()))
            }
            DefenseKind::FrequentItem { num_counters: 0 } => {
                return Err(Error::Config("num_counters must be at least 1".into()))
            }
            _ => {}
        }
        if policy == MacPolicy::Limit(0) {
            return Err(Error::Config("t_mac must be at least 1".into()));
        }
        Ok(Self {
            kind,
            policy,
            reset_on_nrr: true,
        })
    }

    pub fn per_row(t_mac: u64) -> Self {
        Self::new(DefenseKind::PerRowCounter, MacPolicy::Limit(t_mac.max(1))).unwrap()
    }

    /// Short label used in CSV column names, e.g. `per_row_2000000`.
    pub fn label(&self) -> String {
        let kind = match self.kind {
            DefenseKind::PerRowCounter => "per_row".to_string(),
            DefenseKind::GroupCounter { group_size } => format!("group{group_size}"),
            DefenseKind::FrequentItem { num_counters } => format!("mg{num_counters}"),
        };
        format!("{kind}_{}", self.policy)
    }

    /// Whether replaying `attack` in a single window would trigger at least
    /// one NRR.
    pub fn would_detect(&self, attack: &AttackConfig) -> bool {
        let Some(t_mac) = self.policy.threshold() else {
            return false;
        };
        let x = attack.target.row as i64;
        let counts = [
            (x - 2, attack.edge_hc),
            (x - 1, attack.near_hc),
            (x + 1, attack.near_hc),
            (x + 2, attack.edge_hc),
        ];
        match self.kind {
            DefenseKind::PerRowCounter => counts.iter().any(|&(_, c)| c >= t_mac),
            DefenseKind::FrequentItem { num_counters } if num_counters >= counts.len() => {
                counts.iter().any(|&(_, c)| c >= t_mac)
            }
            DefenseKind::GroupCounter { group_size } => {
                let mut groups: HashMap<i64, u64> = HashMap::new();
                for (row, c) in counts {
                    *groups.entry(row.div_euclid(group_size as i64)).or_default() += c;
                }
                groups.values().any(|&c| c >= t_mac)
            }
            DefenseKind::FrequentItem { .. } => {
                let mut state = DefenseState::new(self.clone(), u32::MAX);
                attack
                    .hammer_sequence()
                    .any(|row| state.observe_activate(row, 0).is_some())
            }
        }
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DefenseKind::PerRowCounter => write!(f, "PerRowCounter(t_mac={})", self.policy),
            DefenseKind::GroupCounter { group_size } => {
                write!(
                    f,
                    "GroupCounter(group_size={group_size}, t_mac={})",
                    self.policy
                )
            }
            DefenseKind::FrequentItem { num_counters } => {
                write!(
                    f,
                    "FrequentItem(num_counters={num_counters}, t_mac={})",
                    self.policy
                )
            }
        }
    }
}

/// One issued Nearby Row Refresh.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NrrEvent {
    pub tick: u64,
    pub aggressor: RowId,
    pub refreshed: Vec<RowId>,
}

/// Misra-Gries frequent-item summary. Estimates never exceed the true count
/// and undershoot it by at most `n / (k + 1)` after `n` items.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MisraGries {
    capacity: usize,
    counters: HashMap<RowId, u64>,
}

impl MisraGries {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            counters: HashMap::with_capacity(capacity + 1),
        }
    }

    /// Adds one occurrence of `item` and returns its new estimate.
    pub fn insert(&mut self, item: RowId) -> u64 {
        if let Some(c) = self.counters.get_mut(&item) {
            *c += 1;
            return *c;
        }
        if self.counters.len() < self.capacity {
            self.counters.insert(item, 1);
            return 1;
        }
        self.counters.retain(|_, c| {
            *c -= 1;
            *c > 0
        });
        0
    }

    pub fn estimate(&self, item: RowId) -> u64 {
        self.counters.get(&item).copied().unwrap_or(0)
    }

    pub fn remove(&mut self, item: RowId) {
        self.counters.remove(&item);
    }

    pub fn clear(&mut self) {
        self.counters.clear();
    }

    pub fn len(&self) -> usize {
        self.counters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DefenseState {
    config: DefenseConfig,
    rows_per_bank: u32,
    /// Per-row or per-group counts. Groups are keyed by their first row.
    counters: HashMap<RowId, u64>,
    summary: MisraGries,
    window_start: u64,
    nrr_log: Vec<NrrEvent>,
    /// Set when an NRR fires in the current window.
    flag: bool,
}

impl DefenseState {
    pub fn new(config: DefenseConfig, rows_per_bank: u32) -> Self {
        let capacity = match config.kind {
            DefenseKind::FrequentItem { num_counters } => num_counters,
            _ => 0,
        };
        Self {
            config,
            rows_per_bank,
            counters: HashMap::new(),
            summary: MisraGries::new(capacity),
            window_start: 0,
            nrr_log: Vec::new(),
            flag: false,
        }
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.config
    }

    pub fn window_start(&self) -> u64 {
        self.window_start
    }

    pub fn flag(&self) -> bool {
        self.flag
    }

    pub fn nrr_log(&self) -> &[NrrEvent] {
        &self.nrr_log
    }

    /// Current tracked count for `row` (its group's count for group trackers).
    pub fn count(&self, row: RowId) -> u64 {
        match self.config.kind {
            DefenseKind::PerRowCounter => self.counters.get(&row).copied().unwrap_or(0),
            DefenseKind::GroupCounter { group_size } => self
                .counters
                .get(&self.group_of(row, group_size).0)
                .copied()
                .unwrap_or(0),
            DefenseKind::FrequentItem { .. } => self.summary.estimate(row),
        }
    }

    fn group_of(&self, row: RowId, size: u32) -> (RowId, u32) {
        let first = row.row / size * size;
        (
            RowId::new(row.bank, first),
            size.min(self.rows_per_bank - first),
        )
    }

    fn neighbours(&self, row: RowId) -> Vec<RowId> {
        [-1i64, 1]
            .iter()
            .filter_map(|&d| row.offset(d, self.rows_per_bank))
            .collect()
    }

    /// Records one ACT and returns the NRR it triggers, if any.
    pub fn observe_activate(&mut self, row: RowId, tick: u64) -> Option<NrrEvent> {
        let t_mac = self.config.policy.threshold();
        let reset = self.config.reset_on_nrr;
        let refreshed = match self.config.kind {
            DefenseKind::PerRowCounter => {
                let c = self.counters.entry(row).or_default();
                *c += 1;
                if t_mac.is_some_and(|t| *c >= t) {
                    if reset {
                        *c = 0;
                    }
                    Some(self.neighbours(row))
                } else {
                    None
                }
            }
            DefenseKind::GroupCounter { group_size } => {
                let (first, len) = self.group_of(row, group_size);
                let c = self.counters.entry(first).or_default();
                *c += 1;
                if t_mac.is_some_and(|t| *c >= t) {
                    if reset {
                        *c = 0;
                    }
                    let lo = first.row.saturating_sub(1);
                    let hi = (first.row + len).min(self.rows_per_bank - 1);
                    Some((lo..=hi).map(|r| RowId::new(row.bank, r)).collect())
                } else {
                    None
                }
            }
            DefenseKind::FrequentItem { .. } => {
                let est = self.summary.insert(row);
                if t_mac.is_some_and(|t| est >= t) {
                    if reset {
                        self.summary.remove(row);
                    }
                    Some(self.neighbours(row))
                } else {
                    None
                }
            }
        }?;
        let event = NrrEvent {
            tick,
            aggressor: row,
            refreshed,
        };
        self.flag = true;
        self.nrr_log.push(event.clone());
        Some(event)
    }

    /// Starts a new refresh window at `tick`: all counters and the flag are
    /// cleared. The NRR log is kept.
    pub fn window_rollover(&mut self, tick: u64) {
        self.counters.clear();
        self.summary.clear();
        self.flag = false;
        self.window_start = tick;
    }

    pub fn is_bypassed(&self) -> bool {
        self.nrr_log.is_empty()
    }

    pub fn nrr_csv(&self) -> String {
        nrr_csv(&self.nrr_log)
    }
}

/// `tick,aggressor_row,refreshed_rows` with refreshed rows `;`-separated.
pub fn nrr_csv(log: &[NrrEvent]) -> String {
    let mut s = String::from("tick,aggressor_row,refreshed_rows\n");
    for e in log {
        let rows: Vec<String> = e.refreshed.iter().map(|r| r.to_string()).collect();
        writeln!(s, "{},{},{}", e.tick, e.aggressor, rows.join(";")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(row: u32) -> RowId {
        RowId::new(0, row)
    }

    #[test]
    fn per_row_triggers_on_third() {
        let mut d = DefenseState::new(DefenseConfig::per_row(3), 1024);
        assert!(d.observe_activate(r(99), 0).is_none());
        assert!(d.observe_activate(r(99), 51).is_none());
        let e = d.observe_activate(r(99), 102).unwrap();
        assert_eq!(e.refreshed, vec![r(98), r(100)]);
        assert_eq!(e.tick, 102);
        assert_eq!(d.count(r(99)), 0);
        assert!(!d.is_bypassed());
        assert!(d.flag());
    }

    #[test]
    fn unlimited_never_fires() {
        for policy in [MacPolicy::Unlimited, MacPolicy::Untested] {
            let cfg = DefenseConfig::new(DefenseKind::PerRowCounter, policy).unwrap();
            let mut d = DefenseState::new(cfg, 1024);
            for t in 0..100_000 {
                assert!(d.observe_activate(r(99), t).is_none());
            }
            assert!(d.is_bypassed());
        }
    }

    #[test]
    fn rollover_isolates_windows() {
        let mut d = DefenseState::new(DefenseConfig::per_row(5), 1024);
        for _ in 0..4 {
            d.observe_activate(r(99), 0);
        }
        assert_eq!(d.count(r(99)), 4);
        d.window_rollover(1000);
        assert_eq!(d.count(r(99)), 0);
        for _ in 0..4 {
            assert!(d.observe_activate(r(99), 1001).is_none());
        }
        assert!(d.is_bypassed());
        assert_eq!(d.window_start(), 1000);
    }

    #[test]
    fn without_reset_every_act_fires() {
        let mut cfg = DefenseConfig::per_row(2);
        cfg.reset_on_nrr = false;
        let mut d = DefenseState::new(cfg, 1024);
        let fired: Vec<bool> = (0..5)
            .map(|t| d.observe_activate(r(7), t).is_some())
            .collect();
        assert_eq!(fired, vec![false, true, true, true, true]);
    }

    #[test]
    fn group_refreshes_whole_group() {
        let cfg = DefenseConfig::new(
            DefenseKind::GroupCounter { group_size: 8 },
            MacPolicy::Limit(4),
        )
        .unwrap();
        let mut d = DefenseState::new(cfg, 1024);
        // rows 97 and 98 share group 96..104
        d.observe_activate(r(97), 0);
        d.observe_activate(r(98), 1);
        d.observe_activate(r(97), 2);
        let e = d.observe_activate(r(98), 3).unwrap();
        let rows: Vec<u32> = e.refreshed.iter().map(|x| x.row).collect();
        assert_eq!(rows, (95..=104).collect::<Vec<_>>());
    }

    #[test]
    fn group_at_bank_edge() {
        let cfg = DefenseConfig::new(
            DefenseKind::GroupCounter { group_size: 8 },
            MacPolicy::Limit(1),
        )
        .unwrap();
        let mut d = DefenseState::new(cfg, 10);
        let e = d.observe_activate(r(9), 0).unwrap();
        let rows: Vec<u32> = e.refreshed.iter().map(|x| x.row).collect();
        assert_eq!(rows, vec![7, 8, 9]);
        let e = d.observe_activate(r(0), 0).unwrap();
        assert_eq!(e.refreshed.first().unwrap().row, 0);
        assert_eq!(e.refreshed.last().unwrap().row, 8);
    }

    #[test]
    fn misra_gries_round_robin_three_rows() {
        let cfg = DefenseConfig::new(
            DefenseKind::FrequentItem { num_counters: 2 },
            MacPolicy::Limit(4),
        )
        .unwrap();
        let mut d = DefenseState::new(cfg, 1024);
        // a b c a b c ...: the third distinct row always evicts both counters
        for k in 0..30 {
            assert!(d.observe_activate(r(10 + k % 3), k as u64).is_none());
        }
        assert!(d.is_bypassed());
    }

    #[test]
    fn misra_gries_bound() {
        let mut mg = MisraGries::new(3);
        let stream = [1, 2, 1, 3, 1, 4, 1, 5, 2, 1, 1, 6];
        let mut truth: HashMap<u32, u64> = HashMap::new();
        for &x in &stream {
            mg.insert(r(x));
            *truth.entry(x).or_default() += 1;
        }
        let slack = stream.len() as u64 / 4;
        for (&x, &c) in &truth {
            let e = mg.estimate(r(x));
            assert!(e <= c && c - e <= slack, "{x}: {e} vs {c}");
        }
    }

    #[test]
    fn would_detect_matches_kinds() {
        let x = RowId::new(0, 100);
        let a = AttackConfig::aavaa(x, 1_600_000, 1_600_000);
        assert!(!DefenseConfig::per_row(2_000_000).would_detect(&a));
        assert!(DefenseConfig::per_row(1_600_000).would_detect(&a));
        assert!(DefenseConfig::per_row(2_000_000)
            .would_detect(&AttackConfig::double_sided(x, 2_000_000)));
        let group = DefenseConfig::new(
            DefenseKind::GroupCounter { group_size: 8 },
            MacPolicy::Limit(2_000_000),
        )
        .unwrap();
        // 98, 99, 101 and 102 all fall in group 96..=103
        assert!(group.would_detect(&a));
        let small = AttackConfig::aavaa(x, 400_000, 400_000);
        assert!(!group.would_detect(&small));
        let unlimited =
            DefenseConfig::new(DefenseKind::PerRowCounter, MacPolicy::Unlimited).unwrap();
        assert!(!unlimited.would_detect(&AttackConfig::double_sided(x, 10_000_000)));
        let mg = DefenseConfig::new(
            DefenseKind::FrequentItem { num_counters: 2 },
            MacPolicy::Limit(50),
        )
        .unwrap();
        assert!(!mg.would_detect(&AttackConfig::aavaa(x, 60, 60)));
        assert!(mg.would_detect(&AttackConfig::double_sided(x, 60)));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            "2M".parse::<MacPolicy>().unwrap(),
            MacPolicy::Limit(2_000_000)
        );
        assert_eq!(
            "Untested".parse::<MacPolicy>().unwrap(),
            MacPolicy::Untested
        );
        assert!("0".parse::<MacPolicy>().is_err());
        assert_eq!(DefenseConfig::per_row(5).label(), "per_row_5");
    }

    #[test]
    fn csv_log() {
        let mut d = DefenseState::new(DefenseConfig::per_row(1), 1024);
        d.observe_activate(r(99), 7);
        assert_eq!(
            d.nrr_csv(),
            "tick,aggressor_row,refreshed_rows\n7,0:99,0:98;0:100\n"
        );
    }
}
