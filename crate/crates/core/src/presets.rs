//! Shipped chip profiles.
//!
//! `mf-H` is the only vendor with measured anchors; its analytic constants
//! are the output of [`calibrate`](crate::calibrate::calibrate) on
//! [`mf_h_anchors`] with default options, frozen here so that lookups do
//! not refit. The other vendors are shape-only presets.

use crate::anchors::{Anchor, AnchorTable};
use crate::disturbance::{ChipProfile, DisturbanceParams};
use crate::error::{Error, Result};

pub const DEFAULT_CELLS_PER_ROW: u32 = 65536;

/// Characterisation anchors for mf-H as `(S, T, flips)`: double-sided,
/// ARVRA and AAVAA columns.
pub fn mf_h_anchors() -> Vec<Anchor> {
    const ROWS: [(f64, f64, f64); 15] = [
        (0.0, 500e3, 200.0),
        (0.0, 1e6, 522.0),
        (0.0, 2e6, 980.0),
        (0.0, 5e6, 1799.0),
        (0.0, 10e6, 2486.0),
        (500e3, 0.0, 10.0),
        (1e6, 0.0, 55.0),
        (5e6, 0.0, 752.0),
        (8e6, 0.0, 1005.0),
        (10e6, 0.0, 1343.0),
        (500e3, 500e3, 215.0),
        (900e3, 900e3, 514.0),
        (1.6e6, 1.6e6, 970.0),
        (5e6, 5e6, 2557.0),
        (10e6, 10e6, 3850.0),
    ];
    ROWS.iter().map(|&(s, t, f)| Anchor::new(s, t, f)).collect()
}

pub fn mf_h_params() -> DisturbanceParams {
    DisturbanceParams {
        alpha: 0.26371045507441493,
        gamma: 6.30606826467113e-5,
        eta: 5.821051481990576,
        mu: 15.171781665626913,
        sigma: 1.2400507313698337,
        vulnerable_fraction: 0.051526270520616896,
    }
}

pub const PRESET_NAMES: [&str; 9] = [
    "mf-A",
    "mf-B",
    "mf-C",
    "mf-D",
    "mf-E",
    "mf-F",
    "mf-G",
    "mf-H",
    "mf-H-table",
];

fn shape(alpha: f64, gamma: f64, mu: f64, sigma: f64, rho: f64) -> DisturbanceParams {
    DisturbanceParams {
        alpha,
        gamma,
        eta: 0.0,
        mu,
        sigma,
        vulnerable_fraction: rho,
    }
}

/// Looks up a preset by name, case-insensitively.
pub fn preset(name: &str) -> Result<ChipProfile> {
    let key = name.trim().to_ascii_lowercase().replace('_', "-");
    let cells = DEFAULT_CELLS_PER_ROW;
    let qualitative = |vendor: &str, p: DisturbanceParams| -> Result<ChipProfile> {
        Ok(ChipProfile::analytic(vendor, p, cells)?.qualitative())
    };
    match key.as_str() {
        // edge rows add nothing: double-sided is always optimal
        "mf-a" => qualitative("mf-A", shape(0.0, 0.0, 15.0, 1.2, 0.05)),
        // very few cells at risk
        "mf-b" => qualitative("mf-B", shape(0.2, 0.2, 15.5, 1.0, 0.002)),
        // E(1M, 1M) = E(0, 2M)
        "mf-c" => qualitative("mf-C", shape(0.45, 0.55, 15.0, 1.2, 0.06)),
        // E(k, k) = 1.112 k: balanced sets cost ~80% more total hammers
        "mf-d" => qualitative("mf-D", shape(0.06, 0.052, 14.5, 1.1, 0.05)),
        "mf-e" => qualitative("mf-E", shape(0.0, 0.0, 16.0, 1.5, 0.03)),
        "mf-f" => qualitative("mf-F", shape(0.0, 0.0, 14.0, 0.9, 0.1)),
        "mf-g" => qualitative("mf-G", shape(0.25, 0.15, 15.2, 1.3, 0.04)),
        "mf-h" => Ok(ChipProfile::analytic("mf-H", mf_h_params(), cells)?
            .with_anchors(AnchorTable::new(mf_h_anchors())?)),
        "mf-h-table" => ChipProfile::table_driven(
            "mf-H",
            AnchorTable::new(mf_h_anchors())?,
            mf_h_params(),
            cells,
        ),
        _ => Err(Error::Config(format!(
            "unknown profile {name:?}; known: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

pub fn all_presets() -> Vec<ChipProfile> {
    PRESET_NAMES
        .iter()
        .map(|n| preset(n).expect("shipped presets are valid"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disturbance::classify_chip;

    #[test]
    fn all_presets_build() {
        let all = all_presets();
        assert_eq!(all.len(), PRESET_NAMES.len());
        for p in &all {
            assert!(p.onset_hc < p.saturation_hc, "{}", p.vendor_id);
        }
        assert!(preset("MF_c").is_ok());
        assert!(preset("mf-z").is_err());
    }

    #[test]
    fn expected_classes() {
        for (name, bypass) in [
            ("mf-A", false),
            ("mf-B", false),
            ("mf-C", true),
            ("mf-D", true),
            ("mf-E", false),
            ("mf-F", false),
            ("mf-G", true),
            ("mf-H", true),
            ("mf-H-table", true),
        ] {
            let c = classify_chip(&preset(name).unwrap(), None, 970.0);
            assert_eq!(c.is_bypass(), bypass, "{name}: {c}");
        }
    }

    #[test]
    fn mf_c_balances_at_one_million() {
        let p = preset("mf-C").unwrap();
        let e1 = p.effective_disturbance(1e6, 1e6);
        let e2 = p.effective_disturbance(0.0, 2e6);
        assert!((e1 - e2).abs() < 1e-6);
    }
}
