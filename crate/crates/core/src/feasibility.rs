//! Can a given cell be flipped without tripping the defense?
//!
//! Each target cell is framed as a cell of victim row X. Its threshold is the
//! one a run with the same seed would draw for that row, and the attacker
//! writes the aggressor rows, so the direction rule only rules out cells
//! that already hold the required value.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::attack::AttackConfig;
use crate::defense::DefenseConfig;
use crate::disturbance::{first_integer, row_seed, CellThresholds, ChipProfile};
use crate::dram::{DramGeometry, RowId};
use crate::error::{Error, Result};
use crate::sweep::log_grid;
use crate::trace::{hammer_budget, HammerBudget, TimingParams};

/// Largest per-row count searched when refresh does not bound the attack.
pub const DEFAULT_MAX_HC: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Flippable,
    /// Reachable, but only by configurations the defense detects.
    Blocked,
    Infeasible,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Flippable => "flippable",
            Verdict::Blocked => "blocked",
            Verdict::Infeasible => "infeasible",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetCell {
    pub row: RowId,
    pub cell: u32,
    /// Value the cell must end up holding.
    pub to: bool,
    /// Value it holds now, when known.
    pub current: Option<bool>,
}

fn parse_direction(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "0to1" | "0->1" | "up" | "1" => Some(true),
        "1to0" | "1->0" | "down" | "0" => Some(false),
        _ => None,
    }
}

impl FromStr for TargetCell {
    type Err = Error;

    /// `bank,row,cell,direction[,current]`, direction `0to1` or `1to0`.
    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::CellAddress(line.trim().to_string());
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(4..=5).contains(&f.len()) {
            return Err(bad());
        }
        let bank = f[0].parse().map_err(|_| bad())?;
        let row = f[1].parse().map_err(|_| bad())?;
        let cell = f[2].parse().map_err(|_| bad())?;
        let to = parse_direction(f[3]).ok_or_else(bad)?;
        let current = match f.get(4) {
            None | Some(&"") => None,
            Some(&"0") => Some(false),
            Some(&"1") => Some(true),
            Some(_) => return Err(bad()),
        };
        Ok(Self {
            row: RowId::new(bank, row),
            cell,
            to,
            current,
        })
    }
}

/// Parses a cell list, skipping a header line and blank lines.
pub fn parse_cells_csv(text: &str) -> Result<Vec<TargetCell>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter(|(i, l)| !(*i == 0 && l.trim_start().starts_with("bank")))
        .map(|(_, l)| l.parse())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellVerdict {
    pub target: TargetCell,
    pub verdict: Verdict,
    /// The attack that reaches the cell: undetected for flippable cells,
    /// detected for blocked ones.
    pub witness: Option<(u64, u64)>,
}

#[derive(Clone, Debug)]
pub struct FeasibilityOptions {
    pub timing: TimingParams,
    pub seed: u64,
    pub max_hc: u64,
}

impl Default for FeasibilityOptions {
    fn default() -> Self {
        Self {
            timing: TimingParams::default(),
            seed: 0,
            max_hc: DEFAULT_MAX_HC,
        }
    }
}

/// Highest flip probability over a monotone region, with its argmax. The
/// region is scanned along S; for each S the largest admissible T is found
/// by bisection.
/// Best flip probability in a region and the `(S, T)` attaining it.
type RegionMax = Option<(f64, (u64, u64))>;

fn region_max(
    profile: &ChipProfile,
    max_hc: u64,
    extra: &[u64],
    admissible: impl Fn(u64, u64) -> bool,
) -> RegionMax {
    let mut s_values = log_grid(1000, max_hc, 256);
    s_values.push(0);
    s_values.extend(extra.iter().filter(|&&s| s <= max_hc));
    let mut best: RegionMax = None;
    for s in s_values {
        if !admissible(s, 0) {
            continue;
        }
        let t = match first_integer(0, max_hc, |t| !admissible(s, t)) {
            Some(first_bad) => first_bad - 1,
            None => max_hc,
        };
        let p = profile.flip_probability(s as f64, t as f64);
        if best.is_none_or(|(bp, _)| p > bp) {
            best = Some((p, (s, t)));
        }
    }
    best
}

pub fn feasibility(
    profile: &ChipProfile,
    defense: Option<&DefenseConfig>,
    targets: &[TargetCell],
    options: &FeasibilityOptions,
) -> Result<Vec<CellVerdict>> {
    options.timing.validate()?;
    let d = DramGeometry::default();
    let geometry = DramGeometry::new(d.banks_per_chip, d.rows_per_bank, profile.cells_per_row)?;
    for t in targets {
        geometry
            .check(t.row)
            .map_err(|_| Error::CellAddress(format!("{}:{}", t.row, t.cell)))?;
        if t.row.row < 2 || t.row.row + 2 >= geometry.rows_per_bank {
            return Err(Error::Layout {
                row: t.row.row,
                rows_per_bank: geometry.rows_per_bank,
            });
        }
        if t.cell >= profile.cells_per_row {
            return Err(Error::CellAddress(format!(
                "{}:{} (rows have {} cells)",
                t.row, t.cell, profile.cells_per_row
            )));
        }
    }

    let budget = if options.timing.refresh_enabled {
        hammer_budget(&options.timing)
    } else {
        HammerBudget::Unbounded
    };
    let fits = |s: u64, t: u64| budget.allows(2 * (s + t) + 5);
    let corners: Vec<u64> = defense
        .and_then(|d| d.policy.threshold())
        .map(|t| vec![t.saturating_sub(1)])
        .unwrap_or_default();
    let reach = region_max(profile, options.max_hc, &corners, fits);
    // group counters detect differently depending on where X sits in its group
    let bypass_for = |x: RowId| match defense {
        None => reach,
        Some(d) => region_max(profile, options.max_hc, &corners, |s, t| {
            fits(s, t) && !d.would_detect(&AttackConfig::from_counts(x, s, t))
        }),
    };

    let mut rows: HashMap<RowId, (CellThresholds, RegionMax)> = HashMap::new();
    Ok(targets
        .iter()
        .map(|t| {
            let (th, bypass) = rows.entry(t.row).or_insert_with(|| {
                (
                    CellThresholds::draw(profile, row_seed(options.seed, t.row)),
                    bypass_for(t.row),
                )
            });
            let bypass = *bypass;
            let u = th.draw_of(t.cell as usize);
            let hits = |r: RegionMax| r.filter(|&(p, _)| u <= p).map(|(_, w)| w);
            let (verdict, witness) = if t.current == Some(t.to) {
                (Verdict::Infeasible, None)
            } else if let Some(w) = hits(bypass) {
                (Verdict::Flippable, Some(w))
            } else if let Some(w) = hits(reach) {
                (Verdict::Blocked, Some(w))
            } else {
                (Verdict::Infeasible, None)
            };
            CellVerdict {
                target: t.clone(),
                verdict,
                witness,
            }
        })
        .collect())
}

pub fn verdicts_csv(verdicts: &[CellVerdict]) -> String {
    let mut out = String::from("bank,row,cell,direction,verdict,S,T\n");
    for v in verdicts {
        let (s, t) = v.witness.map_or((String::new(), String::new()), |(s, t)| {
            (s.to_string(), t.to_string())
        });
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            v.target.row.bank,
            v.target.row.row,
            v.target.cell,
            if v.target.to { "0to1" } else { "1to0" },
            v.verdict,
            s,
            t
        ));
    }
    out
}
