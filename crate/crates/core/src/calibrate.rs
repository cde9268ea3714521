//! Fitting analytic profiles to measured `(S, T) → flips` anchors.
//!
//! The objective is the sum of squared relative residuals. Pairs of anchors
//! with the same total hammer count `S + T` carry an extra hinge penalty
//! whenever the fit swaps their observed order, so that an AAVAA point that
//! beats its double-sided counterpart in the data also does in the model.

use crate::anchors::{Anchor, AnchorTable};
use crate::attack::AttackModel;
use crate::disturbance::{norm_cdf, norm_inv, ChipProfile, DisturbanceParams};
use crate::error::{Error, Result};
use crate::optimize::{nelder_mead, NelderMeadOptions};

const ORDER_PENALTY: f64 = 1e-2;
/// Only the largest AAVAA anchors pin the interaction term, so `(γ, η)`
/// trade off along a ridge; a small pull towards low `η` picks the mildest
/// growth that fits.
const GROWTH_RIDGE: f64 = 1e-5;
/// Required gap, in flips, between equal-budget anchors of different rank.
const ORDER_MARGIN: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct CalibrationOptions {
    pub vendor_id: String,
    pub cells_per_row: u32,
    /// Fit the vulnerable fraction; otherwise `vulnerable_fraction` is used.
    pub fit_ceiling: bool,
    pub vulnerable_fraction: f64,
    /// Fit the interaction growth exponent; otherwise `eta` is used.
    pub fit_growth: bool,
    pub eta: f64,
    pub preserve_equal_budget_order: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            vendor_id: "calibrated".into(),
            cells_per_row: 65536,
            fit_ceiling: true,
            vulnerable_fraction: 1.0,
            fit_growth: true,
            eta: 0.0,
            preserve_equal_budget_order: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorResidual {
    pub anchor: Anchor,
    pub predicted: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub profile: ChipProfile,
    pub residuals: Vec<AnchorResidual>,
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    pub objective: f64,
    /// Predictions rank the anchors of every attack model in the same
    /// order as the observations.
    pub column_order_preserved: bool,
    pub warnings: Vec<String>,
}

/// Which parameters are free, and how the unconstrained search vector maps
/// onto them.
struct Layout {
    fit_growth: bool,
    fit_ceiling: bool,
    eta: f64,
    rho: f64,
}

impl Layout {
    fn dim(&self) -> usize {
        4 + self.fit_growth as usize + self.fit_ceiling as usize
    }

    fn unpack(&self, x: &[f64]) -> DisturbanceParams {
        let mut k = 4;
        let eta = if self.fit_growth {
            k += 1;
            x[k - 1].abs()
        } else {
            self.eta
        };
        let rho = if self.fit_ceiling {
            1.0 / (1.0 + (-x[k]).exp())
        } else {
            self.rho
        };
        DisturbanceParams {
            alpha: x[0].clamp(0.0, 1.0),
            gamma: x[1].exp(),
            eta,
            mu: x[2],
            sigma: x[3].exp(),
            vulnerable_fraction: rho,
        }
    }

    fn pack(&self, p: &DisturbanceParams) -> Vec<f64> {
        let mut x = vec![p.alpha, p.gamma.max(1e-300).ln(), p.mu, p.sigma.ln()];
        if self.fit_growth {
            x.push(p.eta);
        }
        if self.fit_ceiling {
            let r = p.vulnerable_fraction.clamp(1e-12, 1.0 - 1e-12);
            x.push((r / (1.0 - r)).ln());
        }
        x
    }

    fn steps(&self) -> Vec<f64> {
        let mut s = vec![0.1, 1.0, 0.5, 0.2];
        if self.fit_growth {
            s.push(0.5);
        }
        if self.fit_ceiling {
            s.push(0.5);
        }
        s
    }
}

fn predict(p: &DisturbanceParams, cells: f64, a: &Anchor) -> f64 {
    cells * p.flip_fraction(p.effective(a.s, a.t))
}

fn model_of(a: &Anchor) -> AttackModel {
    AttackModel::infer((a.s > 0.0) as u64, (a.t > 0.0) as u64)
}

/// Index pairs `(i, j)` with equal `S + T` and `flips_i > flips_j`.
fn equal_budget_pairs(anchors: &[Anchor]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        for (j, b) in anchors.iter().enumerate() {
            let (ta, tb) = (a.s + a.t, b.s + b.t);
            if (ta - tb).abs() <= 1e-9 * ta.max(tb) && a.flips > b.flips {
                out.push((i, j));
            }
        }
    }
    out
}

fn check_anchors(anchors: &[Anchor], cells: u32) -> Result<()> {
    if anchors.len() < 6 {
        return Err(Error::Calibration(format!(
            "need at least 6 anchors, got {}",
            anchors.len()
        )));
    }
    let mut models: Vec<AttackModel> = anchors
        .iter()
        .filter(|a| a.s > 0.0 || a.t > 0.0)
        .map(model_of)
        .collect();
    models.sort_by_key(|m| *m as u8);
    models.dedup();
    if models.len() < 2 {
        return Err(Error::Calibration(
            "anchors must span at least two attack models".into(),
        ));
    }
    if anchors.iter().all(|a| a.flips == 0.0) {
        return Err(Error::Calibration("all anchors have zero flips".into()));
    }
    for a in anchors {
        if !(a.s >= 0.0 && a.t >= 0.0 && a.flips >= 0.0 && a.flips.is_finite()) {
            return Err(Error::Calibration(format!("invalid anchor {a:?}")));
        }
        if a.flips > cells as f64 {
            return Err(Error::Calibration(format!(
                "anchor ({}, {}) exceeds {cells} cells per row",
                a.s, a.t
            )));
        }
    }
    Ok(())
}

/// Starting points derived from the data: a double-sided log-probit
/// regression for `(μ, σ)` per ceiling guess, `α` from the ARVRA anchors,
/// and a spread of interaction strengths.
fn initial_points(anchors: &[Anchor], cells: f64, layout: &Layout) -> Vec<DisturbanceParams> {
    let max_obs = anchors.iter().map(|a| a.flips).fold(0.0, f64::max);
    let ceilings: Vec<f64> = if layout.fit_ceiling {
        [1.3, 2.0, 4.0]
            .iter()
            .map(|k| (k * max_obs / cells).min(0.999))
            .collect()
    } else {
        vec![layout.rho]
    };
    let gammas = [1e-4, 0.03, 0.3];
    let etas: Vec<f64> = if layout.fit_growth {
        vec![0.5, 2.0]
    } else {
        vec![layout.eta]
    };

    let mut out = Vec::new();
    for &rho in &ceilings {
        let at_risk = rho * cells;
        let probit = |a: &Anchor| -> Option<f64> {
            (a.flips > 0.0 && a.flips < at_risk).then(|| norm_inv(a.flips / at_risk))
        };
        let near: Vec<(f64, f64)> = anchors
            .iter()
            .filter(|a| a.s == 0.0 && a.t > 0.0)
            .filter_map(|a| probit(a).map(|z| (z, a.t.ln())))
            .collect();
        let (mu, sigma) = match least_squares_line(&near) {
            Some((slope, intercept)) if slope > 0.0 => (intercept, slope),
            _ => {
                let mut hc: Vec<f64> = anchors.iter().map(|a| a.s.max(a.t)).collect();
                hc.sort_by(f64::total_cmp);
                (hc[hc.len() / 2].max(1.0).ln(), 1.0)
            }
        };
        let mut alphas: Vec<f64> = anchors
            .iter()
            .filter(|a| a.t == 0.0 && a.s > 0.0)
            .filter_map(|a| probit(a).map(|z| (mu + sigma * z).exp() / a.s))
            .collect();
        alphas.sort_by(f64::total_cmp);
        let alpha = alphas
            .get(alphas.len() / 2)
            .copied()
            .unwrap_or(0.3)
            .clamp(0.01, 0.99);
        for &gamma in &gammas {
            for &eta in &etas {
                out.push(DisturbanceParams {
                    alpha,
                    gamma,
                    eta,
                    mu,
                    sigma,
                    vulnerable_fraction: rho,
                });
            }
        }
    }
    out
}

/// Least-squares `y = slope·x + intercept` through `(x, y)` points.
fn least_squares_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Fits an analytic profile to `anchors`.
pub fn calibrate(anchors: &[Anchor], options: &CalibrationOptions) -> Result<Calibration> {
    check_anchors(anchors, options.cells_per_row)?;
    if !options.fit_ceiling
        && !(options.vulnerable_fraction > 0.0 && options.vulnerable_fraction <= 1.0)
    {
        return Err(Error::Calibration(
            "vulnerable_fraction must be in (0, 1]".into(),
        ));
    }
    let cells = options.cells_per_row as f64;
    let layout = Layout {
        fit_growth: options.fit_growth,
        fit_ceiling: options.fit_ceiling,
        eta: options.eta,
        rho: options.vulnerable_fraction,
    };
    let pairs = if options.preserve_equal_budget_order {
        equal_budget_pairs(anchors)
    } else {
        Vec::new()
    };

    let objective = |x: &[f64]| -> f64 {
        let p = layout.unpack(x);
        let pred: Vec<f64> = anchors.iter().map(|a| predict(&p, cells, a)).collect();
        let mut v: f64 = anchors
            .iter()
            .zip(&pred)
            .map(|(a, f)| ((f - a.flips) / a.flips.max(1.0)).powi(2))
            .sum();
        for &(i, j) in &pairs {
            let d = pred[i] - pred[j] - ORDER_MARGIN;
            if d < 0.0 {
                v += ORDER_PENALTY * d * d;
            }
        }
        if layout.fit_growth {
            v += GROWTH_RIDGE * p.eta * p.eta;
        }
        v
    };

    let opts = NelderMeadOptions::default();
    let steps = layout.steps();
    debug_assert_eq!(steps.len(), layout.dim());
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in initial_points(anchors, cells, &layout) {
        let mut m = nelder_mead(objective, &layout.pack(&start), &steps, opts);
        // restart from the optimum to escape a collapsed simplex
        for _ in 0..2 {
            let again = nelder_mead(objective, &m.x, &steps, opts);
            let done = again.value >= m.value - 1e-12;
            m = again;
            if done {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| m.value < b.1) {
            best = Some((m.x, m.value));
        }
    }
    let (x, value) = best.ok_or_else(|| Error::Calibration("no starting point".into()))?;
    let params = layout.unpack(&x);

    let mut warnings = Vec::new();
    for a in anchors.iter().filter(|a| a.t == 0.0 && a.s > 0.0) {
        if let Some(b) = anchors.iter().find(|b| b.s == 0.0 && b.t == a.s) {
            if a.flips > b.flips {
                warnings.push(format!(
                    "flips({h}, 0) = {} exceeds flips(0, {h}) = {}; the α ≤ 1 bound is binding",
                    a.flips,
                    b.flips,
                    h = a.s
                ));
            }
        }
    }
    if params.alpha >= 1.0 - 1e-9 {
        warnings.push("fitted edge weight α sits at its upper bound 1".into());
    }

    let profile =
        ChipProfile::analytic(options.vendor_id.clone(), params, options.cells_per_row)
            .map_err(|e| Error::Calibration(format!("fitted parameters are unusable: {e}")))?;
    let profile = match AnchorTable::new(anchors.to_vec()) {
        Ok(t) => profile.with_anchors(t),
        Err(e) => {
            warnings.push(format!("anchors not attached as a table: {e}"));
            profile
        }
    };

    let residuals: Vec<AnchorResidual> = anchors
        .iter()
        .map(|a| {
            let predicted = profile.expected_flips(a.s, a.t);
            AnchorResidual {
                anchor: *a,
                predicted,
                relative_error: (predicted - a.flips).abs() / a.flips.max(1.0),
            }
        })
        .collect();
    let n = residuals.len() as f64;
    let mean_relative_error = residuals.iter().map(|r| r.relative_error).sum::<f64>() / n;
    let max_relative_error = residuals
        .iter()
        .map(|r| r.relative_error)
        .fold(0.0, f64::max);

    for &(i, j) in &equal_budget_pairs(anchors) {
        if residuals[i].predicted <= residuals[j].predicted {
            warnings.push(format!(
                "fit does not keep ({}, {}) above ({}, {})",
                anchors[i].s, anchors[i].t, anchors[j].s, anchors[j].t
            ));
        }
    }
    let column_order_preserved = column_order_preserved(&residuals);
    if !column_order_preserved {
        warnings.push("fit reorders anchors within an attack model".into());
    }

    Ok(Calibration {
        profile,
        residuals,
        mean_relative_error,
        max_relative_error,
        objective: value,
        column_order_preserved,
        warnings,
    })
}

/// Within each attack model, observations and predictions sort the same
/// way (ties in the observations are ignored).
pub fn column_order_preserved(residuals: &[AnchorResidual]) -> bool {
    residuals.iter().enumerate().all(|(i, a)| {
        residuals[i + 1..].iter().all(|b| {
            if model_of(&a.anchor) != model_of(&b.anchor) || a.anchor.flips == b.anchor.flips {
                return true;
            }
            (a.anchor.flips < b.anchor.flips) == (a.predicted < b.predicted)
        })
    })
}

/// Expected flip count of a fitted parameter set at one anchor; useful for
/// reporting without building a profile.
pub fn predicted_flips(params: &DisturbanceParams, cells_per_row: u32, s: f64, t: f64) -> f64 {
    cells_per_row as f64
        * params.vulnerable_fraction
        * norm_cdf((params.effective(s, t).max(f64::MIN_POSITIVE).ln() - params.mu) / params.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(p: &DisturbanceParams, cells: u32) -> Vec<Anchor> {
        let prof = ChipProfile::analytic("truth", *p, cells).unwrap();
        let pts = [
            (0.0, 0.5e6),
            (0.0, 1e6),
            (0.0, 2e6),
            (0.0, 5e6),
            (0.0, 10e6),
            (0.5e6, 0.0),
            (1e6, 0.0),
            (5e6, 0.0),
            (8e6, 0.0),
            (10e6, 0.0),
            (0.5e6, 0.5e6),
            (0.9e6, 0.9e6),
            (1.6e6, 1.6e6),
            (5e6, 5e6),
            (10e6, 10e6),
        ];
        pts.iter()
            .map(|&(s, t)| Anchor::new(s, t, prof.expected_flips(s, t)))
            .collect()
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let opts = CalibrationOptions::default();
        let few: Vec<Anchor> = (1..5)
            .map(|k| Anchor::new(0.0, k as f64 * 1e6, k as f64))
            .collect();
        assert!(calibrate(&few, &opts).is_err());
        let one_model: Vec<Anchor> = (1..9)
            .map(|k| Anchor::new(0.0, k as f64 * 1e6, k as f64))
            .collect();
        assert!(calibrate(&one_model, &opts).is_err());
        let zeros: Vec<Anchor> = (1..9)
            .map(|k| Anchor::new((k % 2) as f64 * 1e6, k as f64 * 1e6, 0.0))
            .collect();
        assert!(matches!(
            calibrate(&zeros, &opts),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn recovers_known_parameters() {
        let truth = DisturbanceParams {
            alpha: 0.3,
            gamma: 0.25,
            eta: 0.0,
            mu: 15.0,
            sigma: 1.1,
            vulnerable_fraction: 0.08,
        };
        let anchors = synthetic(&truth, 65536);
        let opts = CalibrationOptions {
            fit_ceiling: false,
            vulnerable_fraction: truth.vulnerable_fraction,
            fit_growth: false,
            eta: 0.0,
            ..Default::default()
        };
        let fit = calibrate(&anchors, &opts).unwrap();
        let p = fit.profile.params;
        for (got, want) in [
            (p.alpha, truth.alpha),
            (p.gamma, truth.gamma),
            (p.mu, truth.mu),
            (p.sigma, truth.sigma),
        ] {
            assert!((got - want).abs() <= 0.05 * want, "{p:?}");
        }
        assert!(fit.mean_relative_error < 1e-3);
        assert!(fit.column_order_preserved);
    }

    #[test]
    fn warns_when_edge_beats_near() {
        let anchors = vec![
            Anchor::new(0.0, 1e6, 100.0),
            Anchor::new(0.0, 2e6, 300.0),
            Anchor::new(0.0, 4e6, 700.0),
            Anchor::new(1e6, 0.0, 150.0),
            Anchor::new(2e6, 0.0, 400.0),
            Anchor::new(4e6, 0.0, 900.0),
        ];
        let fit = calibrate(&anchors, &CalibrationOptions::default()).unwrap();
        assert!(
            fit.warnings.iter().any(|w| w.contains("α ≤ 1")),
            "{:?}",
            fit.warnings
        );
        assert!(fit.profile.params.alpha <= 1.0);
    }

    #[test]
    fn pairs_follow_observations() {
        let a = [
            Anchor::new(0.0, 10.0, 5.0),
            Anchor::new(5.0, 5.0, 6.0),
            Anchor::new(10.0, 0.0, 1.0),
        ];
        let mut p = equal_budget_pairs(&a);
        p.sort();
        assert_eq!(p, vec![(0, 2), (1, 0), (1, 2)]);
    }

    #[test]
    fn predicted_matches_profile() {
        let p = DisturbanceParams {
            alpha: 0.2,
            gamma: 0.1,
            eta: 1.0,
            mu: 14.0,
            sigma: 1.3,
            vulnerable_fraction: 0.2,
        };
        let prof = ChipProfile::analytic("x", p, 4096).unwrap();
        let v = predicted_flips(&p, 4096, 2e6, 3e6);
        assert!((v - prof.expected_flips(2e6, 3e6)).abs() < 1e-9);
    }
}
