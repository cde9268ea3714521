//! End-to-end attack runs.
//!
//! An attack is replayed ACT by ACT without materialising the command
//! trace. Every tracked victim row accumulates near (distance 1) and edge
//! (distance 2) activations since its last refresh; when a refresh arrives
//! (an NRR, its own activation, or the end of a refresh window) or the run
//! ends, the cells whose thresholds the accumulated pressure has crossed are
//! flipped. Because the
//! flip probability only grows within a segment, checking at segment ends is
//! the same as flipping at the first crossing.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use crate::attack::{AttackConfig, Interleaving};
use crate::defense::{nrr_csv, DefenseConfig, DefenseState, NrrEvent};
use crate::disturbance::{row_seed, CellThresholds, ChipProfile};
use crate::dram::{DramArrayState, DramGeometry, RowId};
use crate::error::{Error, Result};
use crate::trace::{check_budget, TimingParams};

/// Victim rows reported by a run: X-2..=X+2.
pub const TRACKED_RADIUS: u32 = 2;

/// Target row used when none is given.
pub const DEFAULT_TARGET: RowId = RowId::new(0, 100);

/// Per-row thresholds keyed by `(seed, row)`, shared between runs.
#[derive(Debug, Default)]
pub struct ThresholdCache {
    rows: Mutex<HashMap<(u64, RowId), Arc<CellThresholds>>>,
}

impl ThresholdCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, profile: &ChipProfile, seed: u64, row: RowId) -> Arc<CellThresholds> {
        if let Some(t) = self.rows.lock().unwrap().get(&(seed, row)) {
            return Arc::clone(t);
        }
        let t = Arc::new(CellThresholds::draw(profile, row_seed(seed, row)));
        self.rows
            .lock()
            .unwrap()
            .entry((seed, row))
            .or_insert(t)
            .clone()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReplayMode {
    /// Skip the ACT-level replay when no NRR can fire.
    #[default]
    Auto,
    Always,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipReport {
    pub profile: String,
    pub attack: AttackConfig,
    pub flips_per_row: BTreeMap<RowId, usize>,
    pub total_flips_target_row: usize,
    pub expected_flips_target_row: f64,
    pub total_acts: u64,
    pub detected: bool,
    pub bypassed: bool,
    pub nrr_count: usize,
    pub nrr_log: Vec<NrrEvent>,
    pub seed: u64,
}

impl FlipReport {
    /// No flips anywhere in the tracked rows at readback.
    pub fn protected(&self) -> bool {
        self.flips_per_row.values().all(|&n| n == 0)
    }

    pub const CSV_HEADER: &'static str = "profile,model,bank,row,S,T,seed,total_acts,detected,bypassed,nrr_count,expected_flips,flips_x,flips_xm2,flips_xm1,flips_xp1,flips_xp2";

    pub fn csv_row(&self) -> String {
        let x = self.attack.target;
        let at = |d: i64| {
            x.offset(d, u32::MAX)
                .and_then(|r| self.flips_per_row.get(&r))
                .map_or(String::new(), |n| n.to_string())
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{},{},{}",
            self.profile,
            self.attack.model,
            x.bank,
            x.row,
            self.attack.edge_hc,
            self.attack.near_hc,
            self.seed,
            self.total_acts,
            self.detected,
            self.bypassed,
            self.nrr_count,
            self.expected_flips_target_row,
            self.total_flips_target_row,
            at(-2),
            at(-1),
            at(1),
            at(2),
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn nrr_csv(&self) -> String {
        nrr_csv(&self.nrr_log)
    }
}

struct Victim {
    row: RowId,
    /// Offset from X.
    offset: i64,
    thresholds: Arc<CellThresholds>,
    /// Sums over both distance-1 (resp. distance-2) neighbours.
    near2: u64,
    edge2: u64,
    /// Cells in `thresholds.order()` already checked.
    cursor: usize,
}

impl Victim {
    fn settle(&mut self, profile: &ChipProfile, dram: &mut DramArrayState) {
        let p = profile.flip_probability(self.edge2 as f64 / 2.0, self.near2 as f64 / 2.0);
        let order = self.thresholds.order();
        while self.cursor < order.len() && self.thresholds.draw_of(order[self.cursor] as usize) <= p
        {
            dram.disturb_cell(self.row, order[self.cursor] as usize);
            self.cursor += 1;
        }
    }

    fn refresh(&mut self) {
        self.near2 = 0;
        self.edge2 = 0;
    }

    fn hit(&mut self, aggressor_offset: i64, times: u64) {
        match (aggressor_offset - self.offset).abs() {
            1 => self.near2 += times,
            2 => self.edge2 += times,
            _ => {}
        }
    }
}

/// One ACT at offset `off` from X. Opening a row restores its charge, so the
/// activated row itself starts a new segment.
fn activate(victims: &mut [Victim], off: i64, profile: &ChipProfile, dram: &mut DramArrayState) {
    for v in victims.iter_mut() {
        if v.offset == off {
            if v.near2 + v.edge2 > 0 {
                v.settle(profile, dram);
                v.refresh();
            }
        } else {
            v.hit(off, 1);
        }
    }
}

/// The hammer order as phases of `(pattern, repetitions)`.
fn phases(attack: &AttackConfig) -> Vec<(&'static [i64], u64)> {
    const NEAR: &[i64] = &[-1, 1];
    const EDGE: &[i64] = &[-2, 2];
    const ALL: &[i64] = &[-1, 1, -2, 2];
    let (s, t) = (attack.edge_hc, attack.near_hc);
    match attack.interleaving {
        Interleaving::Sequential => vec![(NEAR, t), (EDGE, s)],
        Interleaving::RoundRobin if t >= s => vec![(ALL, s), (NEAR, t - s)],
        Interleaving::RoundRobin => vec![(ALL, t), (EDGE, s - t)],
    }
}

/// Walks the hammer order without a defense. Inside a phase every row the
/// pattern activates sees the same segment each period once the first
/// period is over, so only two leading periods and the last one are
/// stepped; the periods between only add pressure to rows the pattern never
/// opens.
fn walk_compressed(
    attack: &AttackConfig,
    profile: &ChipProfile,
    victims: &mut [Victim],
    dram: &mut DramArrayState,
) {
    for (pattern, reps) in phases(attack) {
        let head = reps.min(2);
        let tail = (reps - head).min(1);
        let bulk = reps - head - tail;
        for _ in 0..head {
            for &off in pattern {
                activate(victims, off, profile, dram);
            }
        }
        for v in victims.iter_mut().filter(|v| !pattern.contains(&v.offset)) {
            for &off in pattern {
                v.hit(off, bulk);
            }
        }
        for _ in 0..tail {
            for &off in pattern {
                activate(victims, off, profile, dram);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Engine {
    pub geometry: DramGeometry,
    pub timing: TimingParams,
    pub replay: ReplayMode,
}

impl Engine {
    pub fn new(geometry: DramGeometry, timing: TimingParams) -> Result<Self> {
        timing.validate()?;
        Ok(Self {
            geometry,
            timing,
            replay: ReplayMode::Auto,
        })
    }

    /// Default geometry with rows as wide as the profile's.
    pub fn for_profile(profile: &ChipProfile, timing: TimingParams) -> Result<Self> {
        let d = DramGeometry::default();
        Self::new(
            DramGeometry::new(d.banks_per_chip, d.rows_per_bank, profile.cells_per_row)?,
            timing,
        )
    }

    pub fn with_replay(mut self, replay: ReplayMode) -> Self {
        self.replay = replay;
        self
    }

    pub fn run(
        &self,
        profile: &ChipProfile,
        attack: &AttackConfig,
        defense: Option<&DefenseConfig>,
        seed: u64,
    ) -> Result<FlipReport> {
        self.run_cached(profile, attack, defense, seed, &ThresholdCache::new())
    }

    pub fn run_cached(
        &self,
        profile: &ChipProfile,
        attack: &AttackConfig,
        defense: Option<&DefenseConfig>,
        seed: u64,
        cache: &ThresholdCache,
    ) -> Result<FlipReport> {
        attack.validate()?;
        if self.geometry.row_size_bits != profile.cells_per_row {
            return Err(Error::Config(format!(
                "profile has {} cells per row but the geometry has {}",
                profile.cells_per_row, self.geometry.row_size_bits
            )));
        }
        check_budget(attack, &self.timing)?;
        let mut dram = DramArrayState::with_patterns(
            self.geometry,
            attack.target,
            &attack.aggressor_pattern,
            &attack.victim_pattern,
        )?;
        let x = attack.target;
        let mut victims: Vec<Victim> = dram
            .tracked_rows(TRACKED_RADIUS)
            .into_iter()
            .map(|row| Victim {
                row,
                offset: row.row as i64 - x.row as i64,
                thresholds: cache.get(profile, seed, row),
                near2: 0,
                edge2: 0,
                cursor: 0,
            })
            .collect();

        let may_fire = defense.is_some_and(|d| d.would_detect(attack));
        let mut nrr_log = Vec::new();
        if self.replay == ReplayMode::Always || may_fire {
            nrr_log = self.replay(profile, attack, defense, &mut victims, &mut dram);
        } else {
            walk_compressed(attack, profile, &mut victims, &mut dram);
        }
        for v in &mut victims {
            v.settle(profile, &mut dram);
        }

        let flips_per_row: BTreeMap<RowId, usize> = victims
            .iter()
            .map(|v| (v.row, dram.flips_in_row(v.row)))
            .collect();
        let detected = !nrr_log.is_empty();
        Ok(FlipReport {
            profile: profile.vendor_id.clone(),
            attack: attack.clone(),
            total_flips_target_row: flips_per_row[&x],
            flips_per_row,
            expected_flips_target_row: profile
                .expected_flips(attack.edge_hc as f64, attack.near_hc as f64),
            total_acts: attack.total_acts(),
            detected,
            bypassed: !detected,
            nrr_count: nrr_log.len(),
            nrr_log,
            seed,
        })
    }

    fn replay(
        &self,
        profile: &ChipProfile,
        attack: &AttackConfig,
        defense: Option<&DefenseConfig>,
        victims: &mut [Victim],
        dram: &mut DramArrayState,
    ) -> Vec<NrrEvent> {
        let x = attack.target.row as i64;
        let slot = self.timing.slot_ck();
        let window = if self.timing.refresh_enabled {
            self.timing.trefw_ticks()
        } else {
            None
        };
        let mut window_end = window.unwrap_or(u64::MAX);
        let mut state = defense.map(|d| DefenseState::new(d.clone(), self.geometry.rows_per_bank));

        for (i, row) in attack.hammer_sequence().enumerate() {
            let tick = i as u64 * slot;
            while tick >= window_end {
                // the whole bank is refreshed once per window
                for v in victims.iter_mut() {
                    v.settle(profile, dram);
                    v.refresh();
                }
                if let Some(s) = state.as_mut() {
                    s.window_rollover(window_end);
                }
                window_end += window.unwrap();
            }
            activate(victims, row.row as i64 - x, profile, dram);
            let Some(s) = state.as_mut() else { continue };
            if let Some(event) = s.observe_activate(row, tick) {
                for v in victims
                    .iter_mut()
                    .filter(|v| event.refreshed.contains(&v.row))
                {
                    v.settle(profile, dram);
                    v.refresh();
                }
            }
        }
        state.map(|s| s.nrr_log().to_vec()).unwrap_or_default()
    }
}

/// Runs `attack` on the default geometry (one bank of 65536 rows, rows as
/// wide as the profile).
pub fn run_attack(
    profile: &ChipProfile,
    attack: &AttackConfig,
    defense: Option<&DefenseConfig>,
    timing: &TimingParams,
    seed: u64,
) -> Result<FlipReport> {
    Engine::for_profile(profile, *timing)?.run(profile, attack, defense, seed)
}

/// Reports for several runs as one CSV table.
pub fn reports_csv(reports: &[FlipReport]) -> String {
    let mut s = String::from(FlipReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disturbance::DisturbanceParams;
    use crate::dram::DataPattern;

    fn small_profile() -> ChipProfile {
        let p = DisturbanceParams {
            alpha: 0.3,
            gamma: 0.2,
            eta: 0.0,
            mu: 6.0,
            sigma: 1.0,
            vulnerable_fraction: 0.5,
        };
        ChipProfile::analytic("small", p, 1024).unwrap()
    }

    fn engine(p: &ChipProfile) -> Engine {
        Engine::new(
            DramGeometry::new(1, 256, p.cells_per_row).unwrap(),
            TimingParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_attack_is_clean() {
        let p = small_profile();
        let r = engine(&p)
            .run(
                &p,
                &AttackConfig::from_counts(DEFAULT_TARGET, 0, 0),
                None,
                1,
            )
            .unwrap();
        assert_eq!(r.total_flips_target_row, 0);
        assert!(r.protected());
        assert!(!r.detected);
        assert_eq!(r.flips_per_row.len(), 5);
    }

    #[test]
    fn fast_path_matches_replay() {
        let p = small_profile();
        let e = engine(&p);
        let always = e.clone().with_replay(ReplayMode::Always);
        for il in [Interleaving::RoundRobin, Interleaving::Sequential] {
            for (s, t) in [
                (0, 900),
                (700, 0),
                (300, 450),
                (1200, 40),
                (1, 2),
                (3, 3),
                (2000, 2000),
            ] {
                let a = AttackConfig::from_counts(DEFAULT_TARGET, s, t).with_interleaving(il);
                let fast = e.run(&p, &a, None, 9).unwrap();
                let slow = always.run(&p, &a, None, 9).unwrap();
                assert_eq!(fast, slow, "{il} {s} {t}");
            }
        }
    }

    #[test]
    fn opened_rows_do_not_accumulate() {
        // X+1 sees X-1 at distance 2 on every round but is reopened each time
        let p = small_profile();
        let r = engine(&p)
            .run(
                &p,
                &AttackConfig::double_sided(DEFAULT_TARGET, 50_000),
                None,
                2,
            )
            .unwrap();
        let x = DEFAULT_TARGET;
        assert!(r.total_flips_target_row > 0);
        assert_eq!(r.flips_per_row[&x.offset(1, 256).unwrap()], 0);
        assert_eq!(r.flips_per_row[&x.offset(-1, 256).unwrap()], 0);
    }

    #[test]
    fn sequential_tail_disturbs_near_rows() {
        // after the near phase ends, X-2 hammering presses on X-1 unopposed
        let p = small_profile();
        let a = AttackConfig::from_counts(DEFAULT_TARGET, 50_000, 10)
            .with_interleaving(Interleaving::Sequential);
        let r = engine(&p).run(&p, &a, None, 2).unwrap();
        assert!(r.flips_per_row[&DEFAULT_TARGET.offset(-1, 256).unwrap()] > 0);
    }

    #[test]
    fn nrr_resets_pressure() {
        let p = small_profile();
        let e = engine(&p);
        let a = AttackConfig::double_sided(DEFAULT_TARGET, 3000);
        let free = e.run(&p, &a, None, 3).unwrap();
        let guarded = e.run(&p, &a, Some(&DefenseConfig::per_row(50)), 3).unwrap();
        assert!(guarded.detected && !guarded.bypassed);
        assert!(guarded.nrr_count >= 2 * (3000 / 50) - 1);
        assert!(guarded.total_flips_target_row < free.total_flips_target_row);
        // first NRR fires at the 50th ACT of X-1, the 99th ACT overall
        assert_eq!(
            guarded.nrr_log[0].tick,
            98 * TimingParams::default().slot_ck()
        );
    }

    #[test]
    fn flips_survive_later_refreshes() {
        // late NRRs cannot undo flips from before them
        let p = small_profile();
        let e = engine(&p);
        let a = AttackConfig::double_sided(DEFAULT_TARGET, 3000);
        let r = e
            .run(&p, &a, Some(&DefenseConfig::per_row(2999)), 3)
            .unwrap();
        let free = e.run(&p, &a, None, 3).unwrap();
        assert!(r.detected);
        assert!(r.total_flips_target_row > 0);
        assert!(r.total_flips_target_row <= free.total_flips_target_row);
    }

    #[test]
    fn unlimited_policy_equals_no_defense() {
        let p = small_profile();
        let e = engine(&p);
        let a = AttackConfig::aavaa(DEFAULT_TARGET, 500, 800);
        let d = DefenseConfig::new(
            crate::defense::DefenseKind::PerRowCounter,
            crate::defense::MacPolicy::Unlimited,
        )
        .unwrap();
        let with = e
            .clone()
            .with_replay(ReplayMode::Always)
            .run(&p, &a, Some(&d), 5)
            .unwrap();
        let without = e.run(&p, &a, None, 5).unwrap();
        assert_eq!(with.flips_per_row, without.flips_per_row);
    }

    #[test]
    fn equal_patterns_never_flip() {
        let p = small_profile();
        let e = engine(&p);
        let a = AttackConfig::double_sided(DEFAULT_TARGET, 5000)
            .with_patterns(DataPattern::zeros(), DataPattern::zeros());
        assert!(e.run(&p, &a, None, 1).unwrap().protected());
    }

    #[test]
    fn budget_error_with_refresh() {
        let p = small_profile();
        let timing = TimingParams {
            refresh_enabled: true,
            trefw_ms: 0.01,
            ..Default::default()
        };
        let e = Engine::new(DramGeometry::new(1, 256, 1024).unwrap(), timing).unwrap();
        let err = e
            .run(
                &p,
                &AttackConfig::double_sided(DEFAULT_TARGET, 1000),
                None,
                1,
            )
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let p = small_profile();
        let e = Engine::new(
            DramGeometry::new(1, 256, 2048).unwrap(),
            TimingParams::default(),
        )
        .unwrap();
        assert!(e
            .run(&p, &AttackConfig::double_sided(DEFAULT_TARGET, 10), None, 1)
            .is_err());
    }

    #[test]
    fn csv_is_stable() {
        let p = small_profile();
        let e = engine(&p);
        let a = AttackConfig::aavaa(DEFAULT_TARGET, 400, 400);
        let one = e.run(&p, &a, None, 11).unwrap().to_csv();
        let two = e.run(&p, &a, None, 11).unwrap().to_csv();
        assert_eq!(one, two);
        assert!(one.starts_with("profile,model"));
        assert_eq!(one.lines().count(), 2);
    }
}
