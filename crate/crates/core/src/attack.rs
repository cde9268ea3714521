//! Attack descriptions: which rows are hammered and how often.
//!
//! `S` is the per-row hammer count of the edge aggressors X±2 and `T` the
//! per-row count of the near aggressors X±1. Double-sided is `S = 0`,
//! ARVRA is `T = 0`, and AAVAA uses both.

use std::fmt;
use std::str::FromStr;

use crate::dram::{DataPattern, RowId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackModel {
    DoubleSided,
    Arvra,
    Aavaa,
}

impl AttackModel {
    /// The model an `(S, T)` pair describes.
    pub fn infer(edge_hc: u64, near_hc: u64) -> Self {
        match (edge_hc, near_hc) {
            (0, _) => AttackModel::DoubleSided,
            (_, 0) => AttackModel::Arvra,
            _ => AttackModel::Aavaa,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackModel::DoubleSided => "double_sided",
            AttackModel::Arvra => "arvra",
            AttackModel::Aavaa => "aavaa",
        }
    }
}

impl fmt::Display for AttackModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "double_sided" | "doublesided" | "ds" => Ok(AttackModel::DoubleSided),
            "arvra" => Ok(AttackModel::Arvra),
            "aavaa" => Ok(AttackModel::Aavaa),
            other => Err(Error::Config(format!("unknown attack model {other:?}"))),
        }
    }
}

/// Order in which the aggressor ACTs are issued.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Interleaving {
    /// All near hammers first, then all edge hammers.
    Sequential,
    /// X-1, X+1, X-2, X+2 repeated while each pair still has budget.
    #[default]
    RoundRobin,
}

impl fmt::Display for Interleaving {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interleaving::Sequential => "sequential",
            Interleaving::RoundRobin => "round_robin",
        })
    }
}

impl FromStr for Interleaving {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "sequential" | "seq" => Ok(Interleaving::Sequential),
            "round_robin" | "roundrobin" | "rr" => Ok(Interleaving::RoundRobin),
            other => Err(Error::Config(format!("unknown interleaving {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackConfig {
    pub model: AttackModel,
    pub target: RowId,
    /// `S`: ACTs per edge aggressor (X±2).
    pub edge_hc: u64,
    /// `T`: ACTs per near aggressor (X±1).
    pub near_hc: u64,
    pub aggressor_pattern: DataPattern,
    pub victim_pattern: DataPattern,
    pub interleaving: Interleaving,
}

impl AttackConfig {
    pub fn new(model: AttackModel, target: RowId, edge_hc: u64, near_hc: u64) -> Result<Self> {
        let cfg = Self {
            model,
            target,
            edge_hc,
            near_hc,
            aggressor_pattern: DataPattern::ones(),
            victim_pattern: DataPattern::zeros(),
            interleaving: Interleaving::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a config whose model is inferred from `(S, T)`.
    pub fn from_counts(target: RowId, edge_hc: u64, near_hc: u64) -> Self {
        Self::new(
            AttackModel::infer(edge_hc, near_hc),
            target,
            edge_hc,
            near_hc,
        )
        .expect("inferred model is always consistent")
    }

    pub fn double_sided(target: RowId, near_hc: u64) -> Self {
        Self::new(AttackModel::DoubleSided, target, 0, near_hc).expect("S = 0")
    }

    pub fn arvra(target: RowId, edge_hc: u64) -> Self {
        Self::new(AttackModel::Arvra, target, edge_hc, 0).expect("T = 0")
    }

    pub fn aavaa(target: RowId, edge_hc: u64, near_hc: u64) -> Self {
        Self::new(AttackModel::Aavaa, target, edge_hc, near_hc).expect("aavaa accepts any counts")
    }

    pub fn with_interleaving(mut self, interleaving: Interleaving) -> Self {
        self.interleaving = interleaving;
        self
    }

    pub fn with_patterns(mut self, aggressor: DataPattern, victim: DataPattern) -> Self {
        self.aggressor_pattern = aggressor;
        self.victim_pattern = victim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.model {
            AttackModel::DoubleSided if self.edge_hc != 0 => Err(Error::Config(format!(
                "double-sided attack requires S = 0, got S = {}",
                self.edge_hc
            ))),
            AttackModel::Arvra if self.near_hc != 0 => Err(Error::Config(format!(
                "ARVRA attack requires T = 0, got T = {}",
                self.near_hc
            ))),
            _ => Ok(()),
        }
    }

    /// Total ACTs issued by the hammer loops: 2(S + T).
    pub fn total_acts(&self) -> u64 {
        2 * (self.edge_hc + self.near_hc)
    }

    /// Aggressor rows in activation order, lazily. Rows that fall outside
    /// the bank are the caller's problem; layouts are checked beforehand.
    pub fn hammer_sequence(&self) -> HammerSequence {
        HammerSequence::new(self)
    }
}

/// Iterator over the aggressor ACT order of one attack.
#[derive(Clone, Debug)]
pub struct HammerSequence {
    target: RowId,
    edge_hc: u64,
    near_hc: u64,
    interleaving: Interleaving,
    round: u64,
    slot: u8,
}

impl HammerSequence {
    fn new(cfg: &AttackConfig) -> Self {
        Self {
            target: cfg.target,
            edge_hc: cfg.edge_hc,
            near_hc: cfg.near_hc,
            interleaving: cfg.interleaving,
            round: 0,
            slot: 0,
        }
    }

    fn row(&self, delta: i64) -> RowId {
        RowId::new(self.target.bank, (self.target.row as i64 + delta) as u32)
    }
}

impl Iterator for HammerSequence {
    type Item = RowId;

    fn next(&mut self) -> Option<RowId> {
        match self.interleaving {
            Interleaving::Sequential => {
                // near phase occupies rounds [0, T), edge phase [T, T + S)
                let total = self.near_hc + self.edge_hc;
                if self.round >= total {
                    return None;
                }
                let near = self.round < self.near_hc;
                let side = if self.slot == 0 { -1 } else { 1 };
                let delta = if near { side } else { 2 * side };
                self.slot ^= 1;
                if self.slot == 0 {
                    self.round += 1;
                }
                Some(self.row(delta))
            }
            Interleaving::RoundRobin => loop {
                let rounds = self.near_hc.max(self.edge_hc);
                if self.round >= rounds {
                    return None;
                }
                let delta = match self.slot {
                    0 => -1,
                    1 => 1,
                    2 => -2,
                    _ => 2,
                };
                let active = if self.slot < 2 {
                    self.round < self.near_hc
                } else {
                    self.round < self.edge_hc
                };
                self.slot = (self.slot + 1) % 4;
                if self.slot == 0 {
                    self.round += 1;
                }
                if active {
                    return Some(self.row(delta));
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: RowId = RowId::new(0, 100);

    fn rows(cfg: &AttackConfig) -> Vec<u32> {
        cfg.hammer_sequence().map(|r| r.row).collect()
    }

    #[test]
    fn model_invariants() {
        assert!(AttackConfig::new(AttackModel::DoubleSided, X, 1, 5).is_err());
        assert!(AttackConfig::new(AttackModel::Arvra, X, 5, 1).is_err());
        assert!(AttackConfig::new(AttackModel::Aavaa, X, 5, 0).is_ok());
        assert_eq!(AttackModel::infer(0, 3), AttackModel::DoubleSided);
        assert_eq!(AttackModel::infer(3, 0), AttackModel::Arvra);
        assert_eq!(AttackModel::infer(3, 3), AttackModel::Aavaa);
    }

    #[test]
    fn sequential_double_sided() {
        let cfg = AttackConfig::double_sided(X, 3).with_interleaving(Interleaving::Sequential);
        assert_eq!(rows(&cfg), vec![99, 101, 99, 101, 99, 101]);
    }

    #[test]
    fn round_robin_balanced() {
        let cfg = AttackConfig::aavaa(X, 2, 2);
        assert_eq!(rows(&cfg), vec![99, 101, 98, 102, 99, 101, 98, 102]);
    }

    #[test]
    fn round_robin_unbalanced_and_sequential_order() {
        let cfg = AttackConfig::aavaa(X, 1, 3);
        assert_eq!(rows(&cfg), vec![99, 101, 98, 102, 99, 101, 99, 101]);
        let cfg = cfg.with_interleaving(Interleaving::Sequential);
        assert_eq!(rows(&cfg), vec![99, 101, 99, 101, 99, 101, 98, 102]);
    }

    #[test]
    fn empty_attack() {
        assert!(rows(&AttackConfig::from_counts(X, 0, 0)).is_empty());
    }

    #[test]
    fn parse_names() {
        assert_eq!("AAVAA".parse::<AttackModel>().unwrap(), AttackModel::Aavaa);
        assert_eq!(
            "double-sided".parse::<AttackModel>().unwrap(),
            AttackModel::DoubleSided
        );
        assert!("quad".parse::<AttackModel>().is_err());
        assert_eq!(
            "rr".parse::<Interleaving>().unwrap(),
            Interleaving::RoundRobin
        );
    }
}
