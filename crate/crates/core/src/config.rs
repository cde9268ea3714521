//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are case-insensitive.
//! Profile files may end with an `anchors:` line followed by a CSV block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::anchors::{anchors_to_csv, parse_anchor_csv, parse_count, AnchorTable};
use crate::attack::{AttackConfig, AttackModel, Interleaving};
use crate::defense::{DefenseConfig, DefenseKind, MacPolicy};
use crate::disturbance::{ChipProfile, DisturbanceParams, ProfileMode};
use crate::dram::{DataPattern, DramGeometry, RowId};
use crate::error::{Error, Result};
use crate::trace::TimingParams;

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<String>>,
    /// Text after an `anchors:` line, if any.
    pub trailer: Option<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        let mut lines = text.lines().enumerate();
        while let Some((n, raw)) = lines.next() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.eq_ignore_ascii_case("anchors:") {
                let rest: Vec<&str> = lines.map(|(_, l)| l).collect();
                kv.trailer = Some(rest.join("\n"));
                break;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_ascii_lowercase();
            if kv
                .entries
                .insert(key.clone(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().push(key.to_string());
        Some(v)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("bad value {v:?} for {key:?}")))
            })
            .transpose()
    }

    pub fn count_opt(&self, key: &str) -> Result<Option<u64>> {
        self.get(key).map(|v| parse_hc(v, key)).transpose()
    }

    pub fn bool_opt(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean {v:?} for {key:?}"))),
            })
            .transpose()
    }

    /// Fails on keys nobody asked for, which are almost always typos.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

/// A whole hammer count, accepting `k`/`M` suffixes.
pub fn parse_hc(v: &str, key: &str) -> Result<u64> {
    let x = parse_count(v).map_err(|e| Error::Config(format!("{key}: {e}")))?;
    if x.fract() != 0.0 || x > u64::MAX as f64 {
        return Err(Error::Config(format!("{key}: {v:?} is not a whole count")));
    }
    Ok(x as u64)
}

pub fn parse_geometry(kv: &KeyValues) -> Result<DramGeometry> {
    let d = DramGeometry::default();
    DramGeometry::new(
        kv.parse_opt("banks")?.unwrap_or(d.banks_per_chip),
        kv.parse_opt("rows_per_bank")?.unwrap_or(d.rows_per_bank),
        kv.parse_opt("row_size_bits")?.unwrap_or(d.row_size_bits),
    )
}

pub fn parse_timing(kv: &KeyValues) -> Result<TimingParams> {
    let d = TimingParams::default();
    let t = TimingParams {
        tck_ns: kv.parse_opt("tck_ns")?.unwrap_or(d.tck_ns),
        tras_ck: kv.parse_opt("tras_ck")?.unwrap_or(d.tras_ck),
        trp_ck: kv.parse_opt("trp_ck")?.unwrap_or(d.trp_ck),
        sleep_ck: kv.parse_opt("sleep_ck")?.unwrap_or(d.sleep_ck),
        trefw_ms: kv.parse_opt("trefw_ms")?.unwrap_or(d.trefw_ms),
        refresh_enabled: kv.bool_opt("refresh_enabled")?.unwrap_or(d.refresh_enabled),
    };
    t.validate()?;
    Ok(t)
}

/// Attack keys: `model`, `bank`, `row`, `S`, `T`, `aggressor_pattern`,
/// `victim_pattern`, `interleaving`. `model` is inferred when absent.
pub fn parse_attack(kv: &KeyValues) -> Result<AttackConfig> {
    let s = kv.count_opt("s")?.unwrap_or(0);
    let t = kv.count_opt("t")?.unwrap_or(0);
    let model = match kv.get("model") {
        Some(m) => m.parse()?,
        None => AttackModel::infer(s, t),
    };
    let target = RowId::new(
        kv.parse_opt("bank")?.unwrap_or(0),
        kv.parse_opt("row")?
            .ok_or_else(|| Error::Config("missing key \"row\"".into()))?,
    );
    let mut cfg = AttackConfig::new(model, target, s, t)?;
    if let Some(p) = kv.get("aggressor_pattern") {
        cfg.aggressor_pattern = DataPattern::parse_hex(p)?;
    }
    if let Some(p) = kv.get("victim_pattern") {
        cfg.victim_pattern = DataPattern::parse_hex(p)?;
    }
    if let Some(i) = kv.get("interleaving") {
        cfg.interleaving = i.parse::<Interleaving>()?;
    }
    Ok(cfg)
}

pub fn parse_defense(kv: &KeyValues) -> Result<DefenseConfig> {
    let policy = match kv.get("t_mac") {
        None => return Err(Error::Config("missing key \"t_mac\"".into())),
        Some(v) => v.parse::<MacPolicy>()?,
    };
    let kind = match kv
        .require("kind")?
        .to_ascii_lowercase()
        .replace('-', "_")
        .as_str()
    {
        "per_row" | "per_row_counter" | "perrowcounter" => DefenseKind::PerRowCounter,
        "group" | "group_counter" | "groupcounter" => DefenseKind::GroupCounter {
            group_size: kv.parse_opt("group_size")?.unwrap_or(8),
        },
        "frequent_item" | "frequentitem" | "misra_gries" => DefenseKind::FrequentItem {
            num_counters: kv
                .parse_opt("num_counters")?
                .ok_or_else(|| Error::Config("frequent_item needs num_counters".into()))?,
        },
        other => return Err(Error::Config(format!("unknown defense kind {other:?}"))),
    };
    let mut cfg = DefenseConfig::new(kind, policy)?;
    if let Some(r) = kv.bool_opt("reset_on_nrr")? {
        cfg.reset_on_nrr = r;
    }
    Ok(cfg)
}

/// `per_row:2M`, `group8:500k`, `mg16:1M`; append `:keep` to keep counts
/// after an NRR. The threshold also takes `unlimited` and `untested`.
pub fn parse_defense_spec(spec: &str) -> Result<DefenseConfig> {
    let bad = || {
        Error::Config(format!(
            "bad defense {spec:?}; expected e.g. per_row:2M, group8:2M, mg16:2M"
        ))
    };
    let mut parts = spec.trim().split(':');
    let kind = parts
        .next()
        .unwrap_or("")
        .to_ascii_lowercase()
        .replace('-', "_");
    let policy: MacPolicy = parts.next().ok_or_else(bad)?.parse()?;
    let keep = match parts.next() {
        None => false,
        Some("keep") => true,
        Some(_) => return Err(bad()),
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    let kind = if kind == "per_row" {
        DefenseKind::PerRowCounter
    } else if let Some(n) = kind.strip_prefix("group") {
        DefenseKind::GroupCounter {
            group_size: n.parse().map_err(|_| bad())?,
        }
    } else if let Some(n) = kind.strip_prefix("mg") {
        DefenseKind::FrequentItem {
            num_counters: n.parse().map_err(|_| bad())?,
        }
    } else {
        return Err(bad());
    };
    let mut cfg = DefenseConfig::new(kind, policy)?;
    cfg.reset_on_nrr = !keep;
    Ok(cfg)
}

/// Everything one attack run needs, from a single file.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub geometry: Option<DramGeometry>,
    pub timing: TimingParams,
    pub attack: AttackConfig,
    pub defense: Option<DefenseConfig>,
}

/// Attack, timing and geometry keys, plus optional `profile`, `seed` and
/// defense keys (`kind`, `t_mac`, ...). Geometry is `None` unless a
/// geometry key is present.
pub fn parse_experiment(kv: &KeyValues) -> Result<Experiment> {
    let has_geometry = ["banks", "rows_per_bank", "row_size_bits"]
        .iter()
        .any(|k| kv.entries.contains_key(*k));
    let has_defense = ["kind", "t_mac"]
        .iter()
        .any(|k| kv.entries.contains_key(*k));
    let exp = Experiment {
        profile: kv.get("profile").map(str::to_string),
        seed: kv.parse_opt("seed")?,
        geometry: has_geometry.then(|| parse_geometry(kv)).transpose()?,
        timing: parse_timing(kv)?,
        attack: parse_attack(kv)?,
        defense: has_defense.then(|| parse_defense(kv)).transpose()?,
    };
    kv.finish()?;
    Ok(exp)
}

/// Profile keys: `vendor`, `mode`, `alpha`, `gamma`, `eta`, `mu`, `sigma`,
/// `vulnerable_fraction`, `cells_per_row`, then an optional anchors block.
pub fn parse_profile(kv: &KeyValues) -> Result<ChipProfile> {
    let vendor = kv.get("vendor").unwrap_or("custom").to_string();
    let mode: ProfileMode = kv
        .parse_opt::<String>("mode")?
        .map_or(Ok(ProfileMode::Analytic), |m| m.parse())?;
    let cells = kv
        .parse_opt("cells_per_row")?
        .unwrap_or(crate::presets::DEFAULT_CELLS_PER_ROW);
    let table = kv
        .trailer
        .as_deref()
        .map(|t| parse_anchor_csv(t).and_then(AnchorTable::new))
        .transpose()?;
    let num = |key: &str, default: Option<f64>| -> Result<f64> {
        match kv.parse_opt::<f64>(key)? {
            Some(v) => Ok(v),
            None => default.ok_or_else(|| Error::Config(format!("missing key {key:?}"))),
        }
    };
    let table_mode = mode == ProfileMode::TableDriven;
    // table-driven files may omit the closed-form parameters
    let fallback = |v: f64| table_mode.then_some(v);
    let params = DisturbanceParams {
        alpha: num("alpha", fallback(0.0))?,
        gamma: num("gamma", fallback(0.0))?,
        eta: num("eta", Some(0.0))?,
        mu: num("mu", fallback(15.0))?,
        sigma: num("sigma", fallback(1.0))?,
        vulnerable_fraction: num("vulnerable_fraction", Some(1.0))?,
    };
    let qualitative = kv.bool_opt("qualitative")?.unwrap_or(false);
    let mut profile = match mode {
        ProfileMode::Analytic => {
            let p = ChipProfile::analytic(vendor, params, cells)?;
            match table {
                Some(t) => p.with_anchors(t),
                None => p,
            }
        }
        ProfileMode::TableDriven => ChipProfile::table_driven(
            vendor,
            table.ok_or_else(|| {
                Error::Config("table_driven profile needs an anchors block".into())
            })?,
            params,
            cells,
        )?,
    };
    profile.qualitative = qualitative;
    Ok(profile)
}

pub fn profile_to_text(p: &ChipProfile) -> String {
    let mut s = String::new();
    let q = &p.params;
    writeln!(s, "vendor = {}", p.vendor_id).unwrap();
    writeln!(s, "mode = {}", p.mode).unwrap();
    writeln!(s, "alpha = {:?}", q.alpha).unwrap();
    writeln!(s, "gamma = {:?}", q.gamma).unwrap();
    writeln!(s, "eta = {:?}", q.eta).unwrap();
    writeln!(s, "mu = {:?}", q.mu).unwrap();
    writeln!(s, "sigma = {:?}", q.sigma).unwrap();
    writeln!(s, "vulnerable_fraction = {:?}", q.vulnerable_fraction).unwrap();
    writeln!(s, "cells_per_row = {}", p.cells_per_row).unwrap();
    if p.qualitative {
        writeln!(s, "qualitative = true").unwrap();
    }
    writeln!(s, "# onset_hc = {:.0}", p.onset_hc).unwrap();
    writeln!(s, "# saturation_hc = {:.0}", p.saturation_hc).unwrap();
    if !p.anchor_list().is_empty() {
        s.push_str("anchors:\n");
        s.push_str(&anchors_to_csv(p.anchor_list()));
    }
    s
}

/// Loads a profile from a preset name or a profile file path.
pub fn load_profile(spec: &str) -> Result<ChipProfile> {
    if let Ok(p) = crate::presets::preset(spec) {
        return Ok(p);
    }
    let text = std::fs::read_to_string(spec).map_err(|e| {
        Error::Config(format!(
            "profile {spec:?} is neither a preset nor a readable file: {e}"
        ))
    })?;
    let kv = KeyValues::parse(&text)?;
    let p = parse_profile(&kv)?;
    kv.finish()?;
    Ok(p)
}
