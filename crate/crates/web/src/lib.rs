//! Browser bindings. Every export takes plain numbers or strings and returns
//! JSON; errors come back as `{"error": "..."}`.

use hammersim::presets::{all_presets, preset};
use hammersim::{
    classify_chip, find_optimal_set, log_grid, run_attack, sweep, AttackConfig, DefenseConfig,
    DefenseKind, MacPolicy, TimingParams, DEFAULT_TARGET,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct ProfileInfo {
    name: &'static str,
    vendor: String,
    mode: String,
    qualitative: bool,
    onset_hc: f64,
    /// `null` when the profile never saturates.
    saturation_hc: Option<f64>,
    classification: String,
}

#[derive(Serialize)]
struct SurfaceJson {
    profile: String,
    s: Vec<u64>,
    t: Vec<u64>,
    /// `expected[i][j]` is at `(s[i], t[j])`.
    expected: Vec<Vec<f64>>,
    detected: Vec<Vec<bool>>,
    t_mac: u64,
}

#[derive(Serialize)]
struct RunJson {
    s: u64,
    t: u64,
    detected: bool,
    nrr_count: usize,
    flips: usize,
    expected_flips: f64,
    flips_per_row: Vec<(i64, usize)>,
}

#[derive(Serialize)]
struct OptimalJson {
    s: u64,
    t: u64,
    expected_flips: f64,
    t_dbl: Option<u64>,
    total_ratio: Option<f64>,
}

fn json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("plain data serialises"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

/// JS numbers to whole hammer counts.
fn count(x: f64) -> u64 {
    if x.is_finite() && x > 0.0 {
        x.round() as u64
    } else {
        0
    }
}

fn per_row(t_mac: u64) -> Result<DefenseConfig, String> {
    DefenseConfig::new(DefenseKind::PerRowCounter, MacPolicy::Limit(t_mac.max(1)))
        .map_err(|e| e.to_string())
}

fn axis(max_hc: u64, points: usize) -> Vec<u64> {
    let mut v = vec![0];
    v.extend(log_grid((max_hc / 100).max(1), max_hc, points.clamp(2, 64)));
    v
}

/// Shipped presets with their thresholds and classification against a
/// 970-flip target under an untested counter.
#[wasm_bindgen]
pub fn profiles() -> String {
    let names = hammersim::presets::PRESET_NAMES;
    let list: Vec<ProfileInfo> = names
        .iter()
        .zip(all_presets())
        .map(|(&name, p)| ProfileInfo {
            name,
            vendor: p.vendor_id.clone(),
            mode: p.mode.to_string(),
            qualitative: p.qualitative,
            onset_hc: p.onset_hc,
            saturation_hc: p.saturation_hc.is_finite().then_some(p.saturation_hc),
            classification: classify_chip(&p, None, 970.0).to_string(),
        })
        .collect();
    json(Ok(list))
}

/// Expected flips over a log grid up to `max_hc`, with per-row counter
/// detection at `t_mac`.
#[wasm_bindgen]
pub fn flip_surface(profile: &str, t_mac: f64, max_hc: f64, points: usize) -> String {
    let (t_mac, max_hc) = (count(t_mac), count(max_hc));
    json((|| {
        let p = preset(profile).map_err(|e| e.to_string())?;
        let d = per_row(t_mac)?;
        let grid = axis(max_hc.max(100), points);
        let s = sweep(&p, &grid, &grid, &[d], &TimingParams::default(), 0)
            .map_err(|e| e.to_string())?;
        let n = grid.len();
        Ok(SurfaceJson {
            profile: p.vendor_id.clone(),
            expected: s
                .cells
                .chunks(n)
                .map(|r| r.iter().map(|c| c.expected_flips).collect())
                .collect(),
            detected: s
                .cells
                .chunks(n)
                .map(|r| r.iter().map(|c| c.detected[0]).collect())
                .collect(),
            s: grid.clone(),
            t: grid,
            t_mac,
        })
    })())
}

/// One attack against a per-row counter.
#[wasm_bindgen]
pub fn bypass_run(profile: &str, s: f64, t: f64, t_mac: f64, seed: u32) -> String {
    let (s, t, t_mac) = (count(s), count(t), count(t_mac));
    json((|| {
        let p = preset(profile).map_err(|e| e.to_string())?;
        let d = per_row(t_mac)?;
        let a = AttackConfig::from_counts(DEFAULT_TARGET, s, t);
        let r = run_attack(&p, &a, Some(&d), &TimingParams::default(), seed as u64)
            .map_err(|e| e.to_string())?;
        Ok(RunJson {
            s,
            t,
            detected: r.detected,
            nrr_count: r.nrr_count,
            flips: r.total_flips_target_row,
            expected_flips: r.expected_flips_target_row,
            flips_per_row: r
                .flips_per_row
                .iter()
                .map(|(row, &n)| (row.row as i64 - DEFAULT_TARGET.row as i64, n))
                .collect(),
        })
    })())
}

/// Most balanced grid cell reaching `target` flips below `T_dbl`; `null`
/// when there is none.
#[wasm_bindgen]
pub fn optimal_set(profile: &str, target: f64, max_hc: f64, points: usize) -> String {
    let max_hc = count(max_hc);
    json((|| {
        let p = preset(profile).map_err(|e| e.to_string())?;
        let grid = axis(max_hc.max(100), points);
        let s =
            sweep(&p, &grid, &grid, &[], &TimingParams::default(), 0).map_err(|e| e.to_string())?;
        Ok(find_optimal_set(&s, target).map(|o| OptimalJson {
            s: o.s,
            t: o.t,
            expected_flips: o.expected_flips,
            t_dbl: o.t_dbl,
            total_ratio: o.total_ratio(),
        }))
    })())
}
