//! Per-cell disturbance model.
//!
//! Hammering a victim with `T` near and `S` edge activations produces an
//! effective hammer count
//!
//! ```text
//! E = T + α·S + γ·g·(g / 1M)^η,   g = √(S·T)
//! ```
//!
//! and each vulnerable cell flips once `E` passes its own log-normally
//! distributed threshold. With `η = 0` the interaction term is the plain
//! geometric mean. A fraction `ρ` of the row is vulnerable at all, so the
//! expected flip count is `cells · ρ · Φ((ln E − μ)/σ)`.
//!
//! Table-driven profiles skip the closed form and interpolate measured
//! anchors instead (see [`AnchorTable`]).

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::{erfc, erfc_inv};

use crate::anchors::{Anchor, AnchorTable};
use crate::dram::RowId;
use crate::error::{Error, Result};

/// Reference scale of the interaction growth term.
pub const INTERACTION_SCALE_HC: f64 = 1e6;

/// Fraction of at-risk cells that defines the saturation point.
pub const SATURATION_QUANTILE: f64 = 0.999;

/// Upper end of every hammer-count search (about 1.07e9 ACTs per row).
pub const SEARCH_LIMIT_HC: u64 = 1 << 30;

pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub(crate) fn norm_inv(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisturbanceParams {
    /// Weight of edge (X±2) hammers relative to near ones, in `[0, 1]`.
    pub alpha: f64,
    pub gamma: f64,
    /// Growth exponent of the interaction term; 0 gives plain `γ√(ST)`.
    pub eta: f64,
    /// Mean of the log threshold, natural log of hammer counts.
    pub mu: f64,
    pub sigma: f64,
    /// Share of cells that can flip at all.
    pub vulnerable_fraction: f64,
}

impl DisturbanceParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha,
            self.gamma,
            self.eta,
            self.mu,
            self.sigma,
            self.vulnerable_fraction,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Profile("parameters must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Profile(format!(
                "alpha = {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.gamma < 0.0 || self.eta < 0.0 {
            return Err(Error::Profile("gamma and eta must be non-negative".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Profile("sigma must be positive".into()));
        }
        if !(self.vulnerable_fraction > 0.0 && self.vulnerable_fraction <= 1.0) {
            return Err(Error::Profile(
                "vulnerable_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn effective(&self, s: f64, t: f64) -> f64 {
        let s = s.max(0.0);
        let t = t.max(0.0);
        let g = (s * t).sqrt();
        let inter = if g > 0.0 && self.gamma > 0.0 {
            self.gamma * g * (g / INTERACTION_SCALE_HC).powf(self.eta)
        } else {
            0.0
        };
        t + self.alpha * s + inter
    }

    /// Probability that a random cell of the row has flipped at effective
    /// count `e`.
    pub fn flip_fraction(&self, e: f64) -> f64 {
        if e <= 0.0 {
            return 0.0;
        }
        self.vulnerable_fraction * norm_cdf((e.ln() - self.mu) / self.sigma)
    }

    /// Effective count at which a cell with uniform draw `u` flips, or
    /// infinity when it lies above the vulnerable ceiling.
    pub fn threshold_for(&self, u: f64) -> f64 {
        let q = u / self.vulnerable_fraction;
        if q >= 1.0 {
            return f64::INFINITY;
        }
        (self.mu + self.sigma * norm_inv(q)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileMode {
    Analytic,
    TableDriven,
}

impl fmt::Display for ProfileMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileMode::Analytic => "analytic",
            ProfileMode::TableDriven => "table_driven",
        })
    }
}

impl FromStr for ProfileMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "analytic" => Ok(ProfileMode::Analytic),
            "table_driven" | "table" => Ok(ProfileMode::TableDriven),
            other => Err(Error::Config(format!("unknown profile mode {other:?}"))),
        }
    }
}

/// An expected flip count together with whether the table had to
/// extrapolate to produce it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expected {
    pub flips: f64,
    pub extrapolated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChipProfile {
    pub vendor_id: String,
    pub mode: ProfileMode,
    pub params: DisturbanceParams,
    pub cells_per_row: u32,
    /// Double-sided hammer count at which one cell is expected to flip.
    pub onset_hc: f64,
    /// Double-sided hammer count at which 99.9% of the at-risk cells flip.
    pub saturation_hc: f64,
    pub anchors: Option<AnchorTable>,
    /// Shape-only preset with no measured anchors behind it.
    pub qualitative: bool,
}

impl ChipProfile {
    pub fn analytic(
        vendor_id: impl Into<String>,
        params: DisturbanceParams,
        cells_per_row: u32,
    ) -> Result<Self> {
        let mut p = Self {
            vendor_id: vendor_id.into(),
            mode: ProfileMode::Analytic,
            params,
            cells_per_row,
            onset_hc: 0.0,
            saturation_hc: 0.0,
            anchors: None,
            qualitative: false,
        };
        p.finish()?;
        Ok(p)
    }

    /// A profile answering from interpolated anchors. `params` is kept for
    /// [`effective_disturbance`](Self::effective_disturbance) and is
    /// typically a fit of the same anchors.
    pub fn table_driven(
        vendor_id: impl Into<String>,
        table: AnchorTable,
        params: DisturbanceParams,
        cells_per_row: u32,
    ) -> Result<Self> {
        let mut p = Self {
            vendor_id: vendor_id.into(),
            mode: ProfileMode::TableDriven,
            params,
            cells_per_row,
            onset_hc: 0.0,
            saturation_hc: 0.0,
            anchors: Some(table),
            qualitative: false,
        };
        p.finish()?;
        Ok(p)
    }

    pub fn with_anchors(mut self, table: AnchorTable) -> Self {
        self.anchors = Some(table);
        self
    }

    pub fn qualitative(mut self) -> Self {
        self.qualitative = true;
        self
    }

    fn finish(&mut self) -> Result<()> {
        self.params.validate()?;
        if self.cells_per_row == 0 {
            return Err(Error::Profile("cells_per_row must be positive".into()));
        }
        let cells = self.cells_per_row as f64;
        match self.mode {
            ProfileMode::Analytic => {
                let at_risk = cells * self.params.vulnerable_fraction;
                if at_risk < 2.0 {
                    return Err(Error::Profile(format!(
                        "only {at_risk:.2} cells at risk; onset is undefined"
                    )));
                }
                self.onset_hc = self
                    .params
                    .threshold_for(self.params.vulnerable_fraction / at_risk);
                self.saturation_hc = self
                    .params
                    .threshold_for(self.params.vulnerable_fraction * SATURATION_QUANTILE);
            }
            ProfileMode::TableDriven => {
                let table = self
                    .anchors
                    .as_ref()
                    .expect("table-driven profile has anchors");
                if let Some(a) = table.anchors().iter().find(|a| a.flips > cells) {
                    return Err(Error::Profile(format!(
                        "anchor ({}, {}) has {} flips but rows hold {} cells",
                        a.s, a.t, a.flips, cells
                    )));
                }
                let ds = |t: f64| table.value(0.0, t).flips;
                self.onset_hc = first_crossing(ds, 1.0).ok_or_else(|| {
                    Error::Profile("double-sided anchors never reach one flipped cell".into())
                })?;
                self.saturation_hc =
                    first_crossing(ds, SATURATION_QUANTILE * cells).unwrap_or(f64::INFINITY);
            }
        }
        if self.onset_hc.partial_cmp(&self.saturation_hc) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Profile("onset must lie below saturation".into()));
        }
        Ok(())
    }

    pub fn effective_disturbance(&self, s: f64, t: f64) -> f64 {
        self.params.effective(s, t)
    }

    pub fn expected(&self, s: f64, t: f64) -> Expected {
        let cells = self.cells_per_row as f64;
        match self.mode {
            ProfileMode::Analytic => Expected {
                flips: cells * self.params.flip_fraction(self.params.effective(s, t)),
                extrapolated: false,
            },
            ProfileMode::TableDriven => {
                let v = self.anchors.as_ref().unwrap().value(s, t);
                Expected {
                    flips: v.flips.min(cells),
                    extrapolated: v.extrapolated,
                }
            }
        }
    }

    pub fn expected_flips(&self, s: f64, t: f64) -> f64 {
        self.expected(s, t).flips
    }

    /// Probability that an individual cell has flipped after `(S, T)`.
    pub fn flip_probability(&self, s: f64, t: f64) -> f64 {
        (self.expected_flips(s, t) / self.cells_per_row as f64).clamp(0.0, 1.0)
    }

    pub fn anchor_list(&self) -> &[Anchor] {
        self.anchors.as_ref().map_or(&[], |t| t.anchors())
    }
}

/// Smallest `x > 0` with `f(x) ≥ level` for nondecreasing `f`, located by
/// bisection to 1e-9 relative precision.
fn first_crossing(f: impl Fn(f64) -> f64, level: f64) -> Option<f64> {
    let mut hi = 1.0;
    while f(hi) < level {
        hi *= 2.0;
        if hi > 1e15 {
            return None;
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Smallest integer `k` in `[lo, hi]` with `pred(k)`, assuming `pred` is
/// monotone. `None` when `pred(hi)` is false.
pub(crate) fn first_integer(lo: u64, hi: u64, pred: impl Fn(u64) -> bool) -> Option<u64> {
    if !pred(hi) {
        return None;
    }
    let (mut lo, mut hi) = (lo, hi);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// Mixes a run seed with a row address so each row gets an independent
/// stream.
pub fn row_seed(seed: u64, row: RowId) -> u64 {
    let mut z =
        seed ^ ((row.bank as u64) << 32 | row.row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Uniform per-cell draws for one row. A cell flips once the row's flip
/// probability reaches its draw, so the flipped set at any pressure is a
/// prefix of the cells sorted by draw.
///
/// Analytic profiles use independent draws, which is the same as giving
/// every cell a log-normal threshold. Table-driven profiles have no
/// distribution to draw from and use stratified draws instead, so realised
/// counts stay within one cell of the table.
#[derive(Clone, Debug, PartialEq)]
pub struct CellThresholds {
    draws: Vec<f64>,
    order: Vec<u32>,
}

impl CellThresholds {
    pub fn draw(profile: &ChipProfile, seed: u64) -> Self {
        let n = profile.cells_per_row as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<f64> = match profile.mode {
            ProfileMode::Analytic => (0..n).map(|_| open_unit(&mut rng)).collect(),
            ProfileMode::TableDriven => {
                let mut strata: Vec<u32> = (0..n as u32).collect();
                strata.shuffle(&mut rng);
                strata
                    .into_iter()
                    .map(|k| (k as f64 + open_unit(&mut rng)) / n as f64)
                    .collect()
            }
        };
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| draws[a as usize].total_cmp(&draws[b as usize]));
        Self { draws, order }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draw_of(&self, cell: usize) -> f64 {
        self.draws[cell]
    }

    /// Cells sorted by draw, most vulnerable first.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn count_at(&self, probability: f64) -> usize {
        self.order
            .partition_point(|&c| self.draws[c as usize] <= probability)
    }

    pub fn flipped_at(&self, probability: f64) -> &[u32] {
        &self.order[..self.count_at(probability)]
    }
}

/// Cells flipped by `(S, T)` in one row, ascending.
pub fn sample_flips(profile: &ChipProfile, seed: u64, s: f64, t: f64) -> Vec<u32> {
    let cells = CellThresholds::draw(profile, seed);
    let mut out = cells.flipped_at(profile.flip_probability(s, t)).to_vec();
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum Classification {
    Bypass {
        /// Smallest balanced `(k, k)` reaching the target.
        witness: (u64, u64),
        /// Minimal double-sided T reaching the target, if any does.
        t_dbl: Option<u64>,
        expected_flips: f64,
    },
    FailedBypass {
        reason: String,
    },
}

impl Classification {
    pub fn is_bypass(&self) -> bool {
        matches!(self, Classification::Bypass { .. })
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Classification::Bypass {
                witness,
                t_dbl,
                expected_flips,
            } => {
                write!(
                    f,
                    "Bypass witness=({}, {}) expected={expected_flips:.1}",
                    witness.0, witness.1
                )?;
                match t_dbl {
                    Some(t) => write!(f, " t_dbl={t}"),
                    None => write!(f, " t_dbl=unreachable"),
                }
            }
            Classification::FailedBypass { reason } => write!(f, "FailedBypass: {reason}"),
        }
    }
}

/// Minimal double-sided `T` with `expected_flips(0, T) ≥ target`.
pub fn double_sided_threshold(profile: &ChipProfile, flip_target: f64) -> Option<u64> {
    first_integer(0, SEARCH_LIMIT_HC, |t| {
        profile.expected_flips(0.0, t as f64) >= flip_target
    })
}

/// Decides whether some `(S, T)` with both counts below the double-sided
/// requirement (and below `t_mac`, when given) reaches `flip_target`.
pub fn classify_chip(
    profile: &ChipProfile,
    t_mac: Option<u64>,
    flip_target: f64,
) -> Classification {
    let t_dbl = double_sided_threshold(profile, flip_target);
    let cap = t_dbl
        .unwrap_or(SEARCH_LIMIT_HC + 1)
        .min(t_mac.unwrap_or(u64::MAX));
    if cap == 0 {
        return Classification::FailedBypass {
            reason: "no hammering is allowed below the cap".into(),
        };
    }
    let best = cap - 1;
    let reach = |k: u64| profile.expected_flips(k as f64, k as f64);
    if reach(best) < flip_target {
        let reason = if t_dbl.is_none() {
            format!(
                "flip target {flip_target} unreachable within {SEARCH_LIMIT_HC} hammers per row"
            )
        } else {
            format!(
                "best sub-threshold set ({best}, {best}) gives {:.1} < {flip_target} flips",
                reach(best)
            )
        };
        return Classification::FailedBypass { reason };
    }
    let k = first_integer(0, best, |k| reach(k) >= flip_target).expect("reach(best) >= target");
    Classification::Bypass {
        witness: (k, k),
        t_dbl,
        expected_flips: reach(k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DisturbanceParams {
        DisturbanceParams {
            alpha: 0.3,
            gamma: 0.2,
            eta: 0.0,
            mu: 14.5,
            sigma: 1.0,
            vulnerable_fraction: 0.1,
        }
    }

    #[test]
    fn effective_basics() {
        let p = params();
        assert_eq!(p.effective(0.0, 0.0), 0.0);
        assert_eq!(p.effective(5.0, 0.0), 1.5);
        assert!((p.effective(4.0, 9.0) - (9.0 + 1.2 + 0.2 * 6.0)).abs() < 1e-12);
        let q = DisturbanceParams { eta: 1.0, ..p };
        // g = 2M, growth factor 2
        assert!((q.effective(2e6, 2e6) - (2e6 + 0.6e6 + 0.2 * 2e6 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn normal_helpers() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.959963984540054) - 0.975).abs() < 1e-9);
        for p in [1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
            assert!((norm_cdf(norm_inv(p)) - p).abs() < 1e-9 * p);
        }
    }

    #[test]
    fn analytic_profile_quantiles() {
        let prof = ChipProfile::analytic("t", params(), 65536).unwrap();
        assert!((prof.expected_flips(0.0, prof.onset_hc) - 1.0).abs() < 1e-6);
        let sat = prof.expected_flips(0.0, prof.saturation_hc);
        assert!((sat - 0.999 * 6553.6).abs() < 1e-6);
        assert_eq!(prof.expected_flips(0.0, 0.0), 0.0);
        assert!(prof.onset_hc < prof.saturation_hc);
    }

    #[test]
    fn invalid_params() {
        let bad = [
            DisturbanceParams {
                alpha: 1.5,
                ..params()
            },
            DisturbanceParams {
                gamma: -0.1,
                ..params()
            },
            DisturbanceParams {
                sigma: 0.0,
                ..params()
            },
            DisturbanceParams {
                vulnerable_fraction: 0.0,
                ..params()
            },
            DisturbanceParams {
                mu: f64::NAN,
                ..params()
            },
        ];
        for p in bad {
            assert!(ChipProfile::analytic("x", p, 1024).is_err());
        }
        let tiny = DisturbanceParams {
            vulnerable_fraction: 1e-6,
            ..params()
        };
        assert!(ChipProfile::analytic("x", tiny, 1024).is_err());
    }

    #[test]
    fn thresholds_match_fraction() {
        let p = params();
        for u in [1e-4, 0.01, 0.05, 0.0999] {
            let th = p.threshold_for(u);
            assert!((p.flip_fraction(th) - u).abs() < 1e-9);
        }
        assert!(p.threshold_for(0.2).is_infinite());
    }

    #[test]
    fn stratified_draws_within_one_cell() {
        let table = AnchorTable::new(vec![
            Anchor::new(0.0, 1e6, 300.0),
            Anchor::new(1e6, 0.0, 10.0),
            Anchor::new(1e6, 1e6, 400.0),
        ])
        .unwrap();
        let prof = ChipProfile::table_driven("t", table, params(), 4096).unwrap();
        for seed in 0..5 {
            for (s, t) in [(0.0, 1e6), (0.5e6, 0.7e6), (1e6, 1e6), (0.0, 0.3e6)] {
                let n = sample_flips(&prof, seed, s, t).len() as f64;
                assert!((n - prof.expected_flips(s, t)).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn flipped_sets_nest() {
        let prof = ChipProfile::analytic("t", params(), 8192).unwrap();
        let c = CellThresholds::draw(&prof, 7);
        let a = c.flipped_at(0.01);
        let b = c.flipped_at(0.05);
        assert_eq!(&b[..a.len()], a);
        assert_eq!(c.count_at(0.0), 0);
        assert_eq!(c.count_at(1.0), 8192);
    }

    #[test]
    fn row_seeds_differ() {
        let a = row_seed(1, RowId::new(0, 100));
        assert_ne!(a, row_seed(1, RowId::new(0, 101)));
        assert_ne!(a, row_seed(1, RowId::new(1, 100)));
        assert_ne!(a, row_seed(2, RowId::new(0, 100)));
        assert_eq!(a, row_seed(1, RowId::new(0, 100)));
    }

    #[test]
    fn first_integer_search() {
        assert_eq!(first_integer(0, 100, |k| k >= 37), Some(37));
        assert_eq!(first_integer(0, 100, |k| k >= 101), None);
        assert_eq!(first_integer(5, 100, |_| true), Some(5));
    }

    #[test]
    fn classify_linear_profile_fails() {
        let p = DisturbanceParams {
            alpha: 0.0,
            gamma: 0.0,
            ..params()
        };
        let prof = ChipProfile::analytic("a", p, 65536).unwrap();
        let c = classify_chip(&prof, None, 100.0);
        assert!(!c.is_bypass(), "{c}");
        let c = classify_chip(&prof, None, 1e9);
        assert!(
            matches!(c, Classification::FailedBypass { ref reason } if reason.contains("unreachable"))
        );
    }

    #[test]
    fn classify_strong_edge_bypasses() {
        let p = DisturbanceParams {
            alpha: 0.6,
            gamma: 0.6,
            ..params()
        };
        let prof = ChipProfile::analytic("c", p, 65536).unwrap();
        match classify_chip(&prof, None, 500.0) {
            Classification::Bypass {
                witness,
                t_dbl,
                expected_flips,
            } => {
                let t_dbl = t_dbl.unwrap();
                assert!(witness.0 < t_dbl);
                assert!(expected_flips >= 500.0);
                // E(k,k) = 2.2k reaches E(0,t_dbl) at k ≈ t_dbl / 2.2
                let k = t_dbl as f64 / 2.2;
                assert!((witness.0 as f64 - k).abs() <= 2.0, "{witness:?} vs {k}");
            }
            other => panic!("{other}"),
        }
    }
}
