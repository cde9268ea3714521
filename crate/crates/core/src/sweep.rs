//! Flip surfaces over `(S, T)` grids and the search for balanced sets.

use std::fmt::Write as _;

use crate::attack::AttackConfig;
use crate::defense::DefenseConfig;
use crate::disturbance::{row_seed, CellThresholds, ChipProfile};
use crate::dram::{DramArrayState, DramGeometry};
use crate::engine::DEFAULT_TARGET;
use crate::error::{Error, Result};
use crate::trace::{hammer_budget, trace_slots, TimingParams};

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceCell {
    pub s: u64,
    pub t: u64,
    pub expected_flips: f64,
    pub sampled_flips: usize,
    pub extrapolated: bool,
    /// The attack fits one refresh window (always true with refresh off).
    pub fits_window: bool,
    /// One entry per defense, in sweep order.
    pub detected: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub profile: String,
    pub seed: u64,
    pub s_values: Vec<u64>,
    pub t_values: Vec<u64>,
    pub defenses: Vec<String>,
    /// Row-major: all T for the first S, then the next S.
    pub cells: Vec<SurfaceCell>,
}

impl Surface {
    pub fn get(&self, s: u64, t: u64) -> Option<&SurfaceCell> {
        let i = self.s_values.iter().position(|&v| v == s)?;
        let j = self.t_values.iter().position(|&v| v == t)?;
        self.cells.get(i * self.t_values.len() + j)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("S,T,expected_flips,sampled_flips,extrapolated,fits_window");
        for d in &self.defenses {
            write!(out, ",detected_{d}").unwrap();
        }
        out.push('\n');
        for c in &self.cells {
            write!(
                out,
                "{},{},{:.6},{},{},{}",
                c.s, c.t, c.expected_flips, c.sampled_flips, c.extrapolated, c.fits_window
            )
            .unwrap();
            for d in &c.detected {
                write!(out, ",{d}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Expected flips as a gnuplot `nonuniform matrix`: the first line holds
    /// the column count and the T values, each later line an S value and its
    /// row. Plot with `plot 'file' nonuniform matrix with image`.
    pub fn to_plot_data(&self) -> String {
        let mut out = format!("{}", self.t_values.len());
        for t in &self.t_values {
            write!(out, " {t}").unwrap();
        }
        out.push('\n');
        for (i, s) in self.s_values.iter().enumerate() {
            write!(out, "{s}").unwrap();
            for j in 0..self.t_values.len() {
                let c = &self.cells[i * self.t_values.len() + j];
                write!(out, " {:.6}", c.expected_flips).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// `n` points spaced evenly in log between `lo` and `hi`, rounded to whole
/// hammers, strictly increasing.
pub fn log_grid(lo: u64, hi: u64, n: usize) -> Vec<u64> {
    if n == 0 || lo == 0 || hi < lo {
        return Vec::new();
    }
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<u64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp().round() as u64)
        .collect();
    out[n - 1] = hi;
    out.dedup();
    out
}

/// Evaluates every `(S, T)` pair on row X of the default layout. Cells share
/// one threshold draw of X, so a 1×1 sweep agrees with a defense-free
/// [`run_attack`](crate::engine::run_attack) with the same seed.
pub fn sweep(
    profile: &ChipProfile,
    s_values: &[u64],
    t_values: &[u64],
    defenses: &[DefenseConfig],
    timing: &TimingParams,
    seed: u64,
) -> Result<Surface> {
    timing.validate()?;
    if s_values.is_empty() || t_values.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one S and one T value".into(),
        ));
    }
    let target = DEFAULT_TARGET;
    let defaults = AttackConfig::from_counts(target, 0, 0);
    let geometry = DramGeometry::new(
        DramGeometry::default().banks_per_chip,
        DramGeometry::default().rows_per_bank,
        profile.cells_per_row,
    )?;
    let dram = DramArrayState::with_patterns(
        geometry,
        target,
        &defaults.aggressor_pattern,
        &defaults.victim_pattern,
    )?;
    let thresholds = CellThresholds::draw(profile, row_seed(seed, target));
    // eligible[k]: cells among the k most vulnerable that the direction rule lets flip
    let mut eligible = Vec::with_capacity(thresholds.len() + 1);
    eligible.push(0usize);
    for &c in thresholds.order() {
        let ok = dram.flip_direction(target, c as usize).is_some();
        eligible.push(eligible.last().unwrap() + ok as usize);
    }
    let budget = hammer_budget(timing);

    let pairs: Vec<(u64, u64)> = s_values
        .iter()
        .flat_map(|&s| t_values.iter().map(move |&t| (s, t)))
        .collect();
    let eval = |&(s, t): &(u64, u64)| {
        let attack = AttackConfig::from_counts(target, s, t);
        let e = profile.expected(s as f64, t as f64);
        let p = profile.flip_probability(s as f64, t as f64);
        SurfaceCell {
            s,
            t,
            expected_flips: e.flips,
            sampled_flips: eligible[thresholds.count_at(p)],
            extrapolated: e.extrapolated,
            fits_window: !timing.refresh_enabled || budget.allows(trace_slots(&attack)),
            detected: defenses.iter().map(|d| d.would_detect(&attack)).collect(),
        }
    };
    #[cfg(feature = "parallel")]
    let cells = {
        use rayon::prelude::*;
        pairs.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let cells = pairs.iter().map(eval).collect();

    Ok(Surface {
        profile: profile.vendor_id.clone(),
        seed,
        s_values: s_values.to_vec(),
        t_values: t_values.to_vec(),
        defenses: defenses.iter().map(|d| d.label()).collect(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalSet {
    pub s: u64,
    pub t: u64,
    pub expected_flips: f64,
    /// Smallest double-sided count on the surface reaching the target.
    pub t_dbl: Option<u64>,
}

impl OptimalSet {
    /// `(S + T) / T_dbl`: total hammers relative to double-sided.
    pub fn total_ratio(&self) -> Option<f64> {
        self.t_dbl.map(|d| (self.s + self.t) as f64 / d as f64)
    }

    /// How far the larger count sits below `T_dbl`, as a fraction of it.
    pub fn margin(&self) -> Option<f64> {
        self.t_dbl
            .map(|d| (d - self.s.max(self.t)) as f64 / d as f64)
    }
}

/// The most balanced interior cell reaching `flip_target` with both counts
/// below the surface's `T_dbl`. Ties go to fewer total hammers, then smaller S.
pub fn find_optimal_set(surface: &Surface, flip_target: f64) -> Option<OptimalSet> {
    let t_dbl = surface
        .cells
        .iter()
        .filter(|c| c.s == 0 && c.expected_flips >= flip_target)
        .map(|c| c.t)
        .min();
    let limit = t_dbl.unwrap_or(u64::MAX);
    surface
        .cells
        .iter()
        .filter(|c| c.s > 0 && c.t > 0 && c.s < limit && c.t < limit)
        .filter(|c| c.expected_flips >= flip_target)
        .min_by_key(|c| (c.s.abs_diff(c.t), c.s + c.t, c.s))
        .map(|c| OptimalSet {
            s: c.s,
            t: c.t,
            expected_flips: c.expected_flips,
            t_dbl,
        })
}
