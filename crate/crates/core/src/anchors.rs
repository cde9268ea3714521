//! Measured `(S, T) → flips` anchors and the monotone interpolant built on
//! top of them for table-driven profiles.
//!
//! Characterisation anchors sit on a few rays from the origin (double-sided
//! `S = 0`, ARVRA `T = 0`, the `S = T` diagonal) rather than on a grid. The
//! table first interpolates between neighbouring rays at equal
//! `max(S, T)`, samples that onto the grid spanned by all anchor
//! coordinates, makes the grid monotone by running maxima, and then answers
//! queries bilinearly. Bilinear interpolation of a monotone grid is itself
//! monotone, and every anchor is a grid node, so anchors are reproduced
//! exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    /// Edge (X±2) hammer count.
    pub s: f64,
    /// Near (X±1) hammer count.
    pub t: f64,
    pub flips: f64,
}

impl Anchor {
    pub const fn new(s: f64, t: f64, flips: f64) -> Self {
        Self { s, t, flips }
    }
}

/// Parses `S,T,flips` CSV rows. A header line is skipped if present.
pub fn parse_anchor_csv(text: &str) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "anchor line {}: expected S,T,flips",
                n + 1
            )));
        }
        if out.is_empty() && fields[0].eq_ignore_ascii_case("s") {
            continue;
        }
        let num = |s: &str| -> Result<f64> {
            parse_count(s).map_err(|e| Error::Config(format!("anchor line {}: {e}", n + 1)))
        };
        out.push(Anchor::new(
            num(fields[0])?,
            num(fields[1])?,
            num(fields[2])?,
        ));
    }
    Ok(out)
}

pub fn anchors_to_csv(anchors: &[Anchor]) -> String {
    let mut s = String::from("S,T,flips\n");
    for a in anchors {
        writeln!(s, "{},{},{}", a.s, a.t, a.flips).unwrap();
    }
    s
}

/// Parses a hammer count, accepting `k`/`M` suffixes (`500k`, `1.6M`).
pub fn parse_count(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let (num, scale) = match s.chars().last() {
        Some('k') | Some('K') => (&s[..s.len() - 1], 1e3),
        Some('M') | Some('m') => (&s[..s.len() - 1], 1e6),
        _ => (s, 1.0),
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("bad number {s:?}"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("{s:?} must be a non-negative number"));
    }
    Ok(v * scale)
}

/// Anchors sharing one direction `S / (S + T)`.
#[derive(Clone, Debug)]
struct Ray {
    direction: f64,
    /// `(max(S,T), flips)` sorted by radius, starting at the origin.
    points: Vec<(f64, f64)>,
}

impl Ray {
    fn at(&self, m: f64) -> f64 {
        piecewise_linear(&self.points, m)
    }
}

/// Linear interpolation through sorted `(x, y)` knots, extended past the
/// last knot along the final segment.
fn piecewise_linear(points: &[(f64, f64)], x: f64) -> f64 {
    debug_assert!(!points.is_empty());
    if points.len() == 1 {
        return points[0].1;
    }
    let idx = points.partition_point(|p| p.0 <= x);
    let i = idx.clamp(1, points.len() - 1);
    let (x0, y0) = points[i - 1];
    let (x1, y1) = points[i];
    if x1 == x0 {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Result of a table lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableValue {
    pub flips: f64,
    /// Query lay beyond the largest anchored S or T.
    pub extrapolated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTable {
    anchors: Vec<Anchor>,
    s_axis: Vec<f64>,
    t_axis: Vec<f64>,
    /// Row-major `[s][t]`.
    grid: Vec<f64>,
    /// Slope of the last T segment at each S node, as a running max over S.
    edge_slope_t: Vec<f64>,
    /// Slope of the last S segment at each T node, as a running max over T.
    edge_slope_s: Vec<f64>,
}

const DIRECTION_EPS: f64 = 1e-9;

impl AnchorTable {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Profile("anchor table is empty".into()));
        }
        for a in &anchors {
            if !(a.s >= 0.0 && a.t >= 0.0 && a.flips >= 0.0)
                || !(a.s.is_finite() && a.t.is_finite() && a.flips.is_finite())
            {
                return Err(Error::Profile(format!("invalid anchor {a:?}")));
            }
        }
        for (i, a) in anchors.iter().enumerate() {
            for b in &anchors[i + 1..] {
                if a.s == b.s && a.t == b.t && a.flips != b.flips {
                    return Err(Error::Profile(format!(
                        "conflicting anchors at ({}, {})",
                        a.s, a.t
                    )));
                }
            }
        }

        let rays = build_rays(&anchors)?;
        let mut s_axis: Vec<f64> = std::iter::once(0.0)
            .chain(anchors.iter().map(|a| a.s))
            .collect();
        let mut t_axis: Vec<f64> = std::iter::once(0.0)
            .chain(anchors.iter().map(|a| a.t))
            .collect();
        for axis in [&mut s_axis, &mut t_axis] {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
        }

        let nt = t_axis.len();
        let mut grid = vec![0.0; s_axis.len() * nt];
        for (i, &s) in s_axis.iter().enumerate() {
            for (j, &t) in t_axis.iter().enumerate() {
                grid[i * nt + j] = match anchors.iter().find(|a| a.s == s && a.t == t) {
                    Some(a) => a.flips,
                    None => between_rays(&rays, s, t),
                };
            }
        }
        // running maxima along both axes
        for i in 0..s_axis.len() {
            for j in 1..nt {
                grid[i * nt + j] = grid[i * nt + j].max(grid[i * nt + j - 1]);
            }
        }
        for i in 1..s_axis.len() {
            for j in 0..nt {
                grid[i * nt + j] = grid[i * nt + j].max(grid[(i - 1) * nt + j]);
            }
        }
        let ns = s_axis.len();
        let edge_slope_t = running_max((0..ns).map(|i| last_slope(&t_axis, |j| grid[i * nt + j])));
        let edge_slope_s = running_max((0..nt).map(|j| last_slope(&s_axis, |i| grid[i * nt + j])));
        let table = Self {
            anchors,
            s_axis,
            t_axis,
            grid,
            edge_slope_t,
            edge_slope_s,
        };
        for a in &table.anchors {
            let v = table.node(a.s, a.t);
            if v != a.flips {
                return Err(Error::Profile(format!(
                    "anchors are not monotone in S and T: ({}, {}) = {} is dominated by {v}",
                    a.s, a.t, a.flips
                )));
            }
        }
        Ok(table)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn max_s(&self) -> f64 {
        *self.s_axis.last().unwrap()
    }

    pub fn max_t(&self) -> f64 {
        *self.t_axis.last().unwrap()
    }

    fn node(&self, s: f64, t: f64) -> f64 {
        let i = self.s_axis.iter().position(|&v| v == s).unwrap();
        let j = self.t_axis.iter().position(|&v| v == t).unwrap();
        self.grid[i * self.t_axis.len() + j]
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.grid[i * self.t_axis.len() + j]
    }

    /// Interpolated flip count. Past the last anchored coordinate the value
    /// on the boundary is extended linearly with the steepest final-segment
    /// slope seen so far along that boundary, which keeps the surface
    /// monotone, and the result is flagged.
    pub fn value(&self, s: f64, t: f64) -> TableValue {
        let s = s.max(0.0);
        let t = t.max(0.0);
        let (sc, tc) = (s.min(self.max_s()), t.min(self.max_t()));
        let (i, fs) = locate(&self.s_axis, sc);
        let (j, ft) = locate(&self.t_axis, tc);
        let v00 = self.at(i, j);
        let v10 = self.at(i + 1, j);
        let v01 = self.at(i, j + 1);
        let v11 = self.at(i + 1, j + 1);
        let mut flips = v00 * (1.0 - fs) * (1.0 - ft)
            + v10 * fs * (1.0 - ft)
            + v01 * (1.0 - fs) * ft
            + v11 * fs * ft;
        if s > sc {
            flips += (s - sc) * lerp(&self.edge_slope_s, j, ft);
        }
        if t > tc {
            flips += (t - tc) * lerp(&self.edge_slope_t, i, fs);
        }
        TableValue {
            flips: flips.max(0.0),
            extrapolated: s > sc || t > tc,
        }
    }
}

fn lerp(v: &[f64], i: usize, f: f64) -> f64 {
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

fn last_slope(axis: &[f64], value: impl Fn(usize) -> f64) -> f64 {
    let n = axis.len();
    if n < 2 {
        return 0.0;
    }
    (value(n - 1) - value(n - 2)) / (axis[n - 1] - axis[n - 2])
}

fn running_max(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut m = 0.0f64;
    values
        .map(|v| {
            m = m.max(v);
            m
        })
        .collect()
}

/// Cell index and fractional position of `x` on `axis`, with `x` inside
/// the axis range. Single-node axes yield a degenerate cell.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    if axis.len() < 2 {
        return (0, 0.0);
    }
    let idx = axis.partition_point(|&v| v <= x);
    let i = idx.clamp(1, axis.len() - 1) - 1;
    let (a, b) = (axis[i], axis[i + 1]);
    (i, (x - a) / (b - a))
}

fn build_rays(anchors: &[Anchor]) -> Result<Vec<Ray>> {
    let mut rays: Vec<Ray> = Vec::new();
    for a in anchors {
        if a.s == 0.0 && a.t == 0.0 {
            continue;
        }
        let dir = a.s / (a.s + a.t);
        let m = a.s.max(a.t);
        match rays
            .iter_mut()
            .find(|r| (r.direction - dir).abs() < DIRECTION_EPS)
        {
            Some(r) => r.points.push((m, a.flips)),
            None => rays.push(Ray {
                direction: dir,
                points: vec![(m, a.flips)],
            }),
        }
    }
    if rays.is_empty() {
        return Err(Error::Profile("anchors contain no hammering".into()));
    }
    let origin = anchors
        .iter()
        .find(|a| a.s == 0.0 && a.t == 0.0)
        .map_or(0.0, |a| a.flips);
    for r in &mut rays {
        r.points.push((0.0, origin));
        r.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if r.points.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(Error::Profile(format!(
                "anchors along direction S/(S+T) = {:.3} decrease with hammer count",
                r.direction
            )));
        }
    }
    rays.sort_by(|a, b| a.direction.total_cmp(&b.direction));
    Ok(rays)
}

fn between_rays(rays: &[Ray], s: f64, t: f64) -> f64 {
    if s == 0.0 && t == 0.0 {
        return rays[0].points[0].1;
    }
    let dir = s / (s + t);
    let m = s.max(t);
    let k = rays.partition_point(|r| r.direction <= dir);
    if k == 0 {
        return rays[0].at(m);
    }
    if k == rays.len() {
        return rays[k - 1].at(m);
    }
    let (lo, hi) = (&rays[k - 1], &rays[k]);
    let w = (dir - lo.direction) / (hi.direction - lo.direction);
    (1.0 - w) * lo.at(m) + w * hi.at(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_rays() -> Vec<Anchor> {
        vec![
            Anchor::new(0.0, 1.0, 10.0),
            Anchor::new(0.0, 2.0, 30.0),
            Anchor::new(1.0, 0.0, 2.0),
            Anchor::new(2.0, 0.0, 6.0),
            Anchor::new(1.0, 1.0, 15.0),
            Anchor::new(2.0, 2.0, 50.0),
        ]
    }

    #[test]
    fn reproduces_anchors() {
        let tab = AnchorTable::new(three_rays()).unwrap();
        for a in three_rays() {
            let v = tab.value(a.s, a.t);
            assert_eq!(v.flips, a.flips);
            assert!(!v.extrapolated);
        }
        assert_eq!(tab.value(0.0, 0.0).flips, 0.0);
    }

    #[test]
    fn monotone_on_dense_grid() {
        let tab = AnchorTable::new(three_rays()).unwrap();
        let pts: Vec<f64> = (0..=30).map(|k| k as f64 * 0.1).collect();
        for &s in &pts {
            for w in pts.windows(2) {
                assert!(tab.value(s, w[1]).flips >= tab.value(s, w[0]).flips - 1e-12);
                assert!(tab.value(w[1], s).flips >= tab.value(w[0], s).flips - 1e-12);
            }
        }
    }

    #[test]
    fn extrapolation_is_flagged() {
        let tab = AnchorTable::new(three_rays()).unwrap();
        let v = tab.value(0.0, 3.0);
        assert!(v.extrapolated);
        assert!(v.flips > 30.0);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(AnchorTable::new(vec![]).is_err());
        assert!(AnchorTable::new(vec![Anchor::new(0.0, 0.0, 0.0)]).is_err());
        assert!(AnchorTable::new(vec![
            Anchor::new(0.0, 1.0, 10.0),
            Anchor::new(0.0, 2.0, 5.0)
        ])
        .is_err());
        assert!(AnchorTable::new(vec![
            Anchor::new(0.0, 1.0, 10.0),
            Anchor::new(0.0, 1.0, 11.0)
        ])
        .is_err());
        // (1,1) below (0,1) breaks monotonicity in S
        assert!(AnchorTable::new(vec![
            Anchor::new(0.0, 1.0, 10.0),
            Anchor::new(1.0, 1.0, 5.0)
        ])
        .is_err());
    }

    #[test]
    fn csv_parsing() {
        let a = parse_anchor_csv("S,T,flips\n0,500k,200\n1.6M,1.6M,970\n").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[1], Anchor::new(1.6e6, 1.6e6, 970.0));
        assert!(parse_anchor_csv("0,1\n").is_err());
        assert!(parse_anchor_csv("0,-1,3\n").is_err());
        let back = parse_anchor_csv(&anchors_to_csv(&a)).unwrap();
        assert_eq!(back, a);
    }
}
