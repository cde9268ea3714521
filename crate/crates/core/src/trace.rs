//! DDR4 command traces: compilation of hammer loops into timed ACT/PRE
//! streams, timing validation, and the per-refresh-window hammer budget.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::attack::{AttackConfig, Interleaving};
use crate::dram::{DramGeometry, RowId};
use crate::error::{Error, Result};

/// Timing parameters in clock cycles (`tCK` units) unless noted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingParams {
    pub tck_ns: f64,
    pub tras_ck: u32,
    pub trp_ck: u32,
    /// Idle cycles between ACT and PRE inside one `tRAS`.
    pub sleep_ck: u32,
    pub trefw_ms: f64,
    pub refresh_enabled: bool,
}

impl Default for TimingParams {
    /// DDR4-2400 with refresh disabled, as in the characterisation runs.
    fn default() -> Self {
        Self {
            tck_ns: 0.833,
            tras_ck: 39,
            trp_ck: 12,
            sleep_ck: 5,
            trefw_ms: 64.0,
            refresh_enabled: false,
        }
    }
}

impl TimingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tck_ns > 0.0 && self.tck_ns.is_finite()) {
            return Err(Error::Timing(format!("tCK = {} ns", self.tck_ns)));
        }
        if self.tras_ck == 0 || self.trp_ck == 0 || self.sleep_ck == 0 {
            return Err(Error::Timing("tRAS, tRP and sleep must be positive".into()));
        }
        if self.sleep_ck >= self.tras_ck {
            return Err(Error::Timing(format!(
                "sleep of {} cycles does not fit inside tRAS = {}",
                self.sleep_ck, self.tras_ck
            )));
        }
        if self.trefw_ms.is_nan() || self.trefw_ms <= 0.0 {
            return Err(Error::Timing(format!("tREFW = {} ms", self.trefw_ms)));
        }
        Ok(())
    }

    /// Cycles taken by one ACT → PRE → next ACT iteration.
    pub fn slot_ck(&self) -> u64 {
        self.tras_ck as u64 + self.trp_ck as u64
    }

    /// Refresh window length in whole clock cycles, or `None` when infinite.
    pub fn trefw_ticks(&self) -> Option<u64> {
        let ticks = (self.trefw_ms * 1e6 / self.tck_ns).floor();
        ticks.is_finite().then_some(ticks as u64)
    }
}

/// Number of hammer iterations that fit in one refresh window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HammerBudget {
    Bounded(u64),
    Unbounded,
}

impl HammerBudget {
    pub fn allows(self, iterations: u64) -> bool {
        match self {
            HammerBudget::Bounded(b) => iterations <= b,
            HammerBudget::Unbounded => true,
        }
    }
}

/// `floor(tREFW / ((tRAS + tRP) · tCK))`.
pub fn hammer_budget(timing: &TimingParams) -> HammerBudget {
    match timing.trefw_ticks() {
        Some(ticks) => HammerBudget::Bounded(ticks / timing.slot_ck()),
        None => HammerBudget::Unbounded,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CommandKind {
    Act,
    Pre,
    Rd,
    Wr,
    Ref,
    Nrr,
}

impl CommandKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            CommandKind::Act => "ACT",
            CommandKind::Pre => "PRE",
            CommandKind::Rd => "RD",
            CommandKind::Wr => "WR",
            CommandKind::Ref => "REF",
            CommandKind::Nrr => "NRR",
        }
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl FromStr for CommandKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ACT" => CommandKind::Act,
            "PRE" => CommandKind::Pre,
            "RD" => CommandKind::Rd,
            "WR" => CommandKind::Wr,
            "REF" => CommandKind::Ref,
            "NRR" => CommandKind::Nrr,
            other => return Err(Error::Config(format!("unknown command {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Command {
    pub kind: CommandKind,
    pub address: RowId,
    /// Column index, for RD/WR only.
    pub column: Option<u32>,
    /// Absolute time in tCK units.
    pub tick: u64,
}

impl Command {
    pub fn new(kind: CommandKind, address: RowId, tick: u64) -> Self {
        Self {
            kind,
            address,
            column: None,
            tick,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommandTrace {
    pub timing: TimingParams,
    pub interleaving: Interleaving,
    pub commands: Vec<Command>,
}

impl CommandTrace {
    pub fn count(&self, kind: CommandKind) -> usize {
        self.commands.iter().filter(|c| c.kind == kind).count()
    }

    /// Writes the `TICK KIND BANK ROW [COL]` text format.
    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        for c in &self.commands {
            match c.column {
                Some(col) => writeln!(
                    out,
                    "{} {} {} {} {}",
                    c.tick, c.kind, c.address.bank, c.address.row, col
                )?,
                None => writeln!(
                    out,
                    "{} {} {} {}",
                    c.tick, c.kind, c.address.bank, c.address.row
                )?,
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Parses the `TICK KIND BANK ROW [COL]` text format.
pub fn parse_commands(text: &str) -> Result<Vec<Command>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(Error::Config(format!(
                "trace line {}: expected TICK KIND BANK ROW [COL]",
                n + 1
            )));
        }
        let num = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|e| Error::Config(format!("trace line {}: {e}", n + 1)))
        };
        let mut cmd = Command::new(
            fields[1].parse()?,
            RowId::new(num(fields[2])? as u32, num(fields[3])? as u32),
            num(fields[0])?,
        );
        if let Some(col) = fields.get(4) {
            cmd.column = Some(num(col)? as u32);
        }
        out.push(cmd);
    }
    Ok(out)
}

/// Offsets read back after hammering, relative to X.
const READBACK_OFFSETS: [i64; 5] = [-2, -1, 0, 1, 2];

/// Hammer slots plus readback slots a compiled trace occupies.
pub fn trace_slots(config: &AttackConfig) -> u64 {
    config.total_acts() + READBACK_OFFSETS.len() as u64
}

/// Compiles the counter-bypass procedure: 2T ACT/PRE pairs on X±1, 2S on
/// X±2, ordered by the interleaving mode, then one RD/PRE per tracked row.
/// Every iteration occupies `tRAS + tRP` cycles.
pub fn compile_counter_bypass(
    config: &AttackConfig,
    geometry: &DramGeometry,
    timing: &TimingParams,
) -> Result<CommandTrace> {
    timing.validate()?;
    config.validate()?;
    geometry.check(config.target)?;
    if config.target.row < 2 || config.target.row + 2 >= geometry.rows_per_bank {
        return Err(Error::Layout {
            row: config.target.row,
            rows_per_bank: geometry.rows_per_bank,
        });
    }
    check_budget(config, timing)?;

    let slot = timing.slot_ck();
    let tras = timing.tras_ck as u64;
    let mut commands = Vec::with_capacity(2 * config.total_acts() as usize + 10);
    let mut tick = 0u64;
    for row in config.hammer_sequence() {
        commands.push(Command::new(CommandKind::Act, row, tick));
        commands.push(Command::new(CommandKind::Pre, row, tick + tras));
        tick += slot;
    }
    for d in READBACK_OFFSETS {
        let row = RowId::new(config.target.bank, (config.target.row as i64 + d) as u32);
        let mut rd = Command::new(CommandKind::Rd, row, tick);
        rd.column = Some(0);
        commands.push(rd);
        commands.push(Command::new(CommandKind::Pre, row, tick + tras));
        tick += slot;
    }
    Ok(CommandTrace {
        timing: *timing,
        interleaving: config.interleaving,
        commands,
    })
}

/// Fails with a budget error when refresh is on and the attack does not fit
/// one refresh window.
pub fn check_budget(config: &AttackConfig, timing: &TimingParams) -> Result<()> {
    if !timing.refresh_enabled {
        return Ok(());
    }
    let needed = trace_slots(config);
    match hammer_budget(timing) {
        HammerBudget::Bounded(budget) if needed > budget => Err(Error::Budget { needed, budget }),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// ACT → PRE closer than tRAS.
    Tras {
        row: RowId,
        act_tick: u64,
        pre_tick: u64,
    },
    /// PRE → ACT on one bank closer than tRP.
    Trp {
        bank: u32,
        pre_tick: u64,
        act_tick: u64,
    },
    /// Ticks not strictly increasing on one bank.
    Ordering { bank: u32, tick: u64 },
    /// ACT to a bank that already has an open row.
    BankOpen { bank: u32, tick: u64 },
    /// Trace span longer than the refresh window.
    Trefw { span_ticks: u64, window_ticks: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Tras {
                row,
                act_tick,
                pre_tick,
            } => write!(f, "tRAS: row {row} ACT@{act_tick} PRE@{pre_tick}"),
            Violation::Trp {
                bank,
                pre_tick,
                act_tick,
            } => write!(f, "tRP: bank {bank} PRE@{pre_tick} ACT@{act_tick}"),
            Violation::Ordering { bank, tick } => {
                write!(f, "ordering: bank {bank} tick {tick} not increasing")
            }
            Violation::BankOpen { bank, tick } => {
                write!(f, "bank {bank} already open at ACT@{tick}")
            }
            Violation::Trefw {
                span_ticks,
                window_ticks,
            } => write!(f, "tREFW: span {span_ticks} > window {window_ticks} ticks"),
        }
    }
}

/// Span of a command list in ticks: from the first command until the bank
/// is precharged again after the last one.
pub fn trace_span(commands: &[Command], timing: &TimingParams) -> u64 {
    let Some(first) = commands.iter().map(|c| c.tick).min() else {
        return 0;
    };
    let end = commands
        .iter()
        .map(|c| match c.kind {
            CommandKind::Pre => c.tick + timing.trp_ck as u64,
            _ => c.tick + 1,
        })
        .max()
        .unwrap_or(first);
    end - first
}

/// Checks tRAS, tRP, per-bank ordering and (with refresh on) the tREFW span.
pub fn validate_trace(trace: &CommandTrace) -> Vec<Violation> {
    use std::collections::HashMap;

    #[derive(Default)]
    struct Bank {
        open: Option<(RowId, u64)>,
        last_pre: Option<u64>,
        last_tick: Option<u64>,
    }

    let t = &trace.timing;
    let mut banks: HashMap<u32, Bank> = HashMap::new();
    let mut out = Vec::new();
    for c in &trace.commands {
        let b = banks.entry(c.address.bank).or_default();
        if let Some(prev) = b.last_tick {
            if c.tick <= prev {
                out.push(Violation::Ordering {
                    bank: c.address.bank,
                    tick: c.tick,
                });
            }
        }
        b.last_tick = Some(c.tick);
        match c.kind {
            CommandKind::Act => {
                if b.open.is_some() {
                    out.push(Violation::BankOpen {
                        bank: c.address.bank,
                        tick: c.tick,
                    });
                }
                if let Some(pre) = b.last_pre {
                    if c.tick < pre + t.trp_ck as u64 {
                        out.push(Violation::Trp {
                            bank: c.address.bank,
                            pre_tick: pre,
                            act_tick: c.tick,
                        });
                    }
                }
                b.open = Some((c.address, c.tick));
            }
            CommandKind::Pre => {
                if let Some((row, act)) = b.open.take() {
                    if c.tick < act + t.tras_ck as u64 {
                        out.push(Violation::Tras {
                            row,
                            act_tick: act,
                            pre_tick: c.tick,
                        });
                    }
                }
                b.last_pre = Some(c.tick);
            }
            _ => {}
        }
    }
    if t.refresh_enabled {
        if let Some(window) = t.trefw_ticks() {
            let span = trace_span(&trace.commands, t);
            if span > window {
                out.push(Violation::Trefw {
                    span_ticks: span,
                    window_ticks: window,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackConfig;

    const X: RowId = RowId::new(0, 100);

    fn geom() -> DramGeometry {
        DramGeometry::new(1, 1024, 64).unwrap()
    }

    fn acts(trace: &CommandTrace) -> Vec<u32> {
        trace
            .commands
            .iter()
            .filter(|c| c.kind == CommandKind::Act)
            .map(|c| c.address.row)
            .collect()
    }

    #[test]
    fn double_sided_sequential_trace() {
        let cfg = AttackConfig::double_sided(X, 3).with_interleaving(Interleaving::Sequential);
        let tr = compile_counter_bypass(&cfg, &geom(), &TimingParams::default()).unwrap();
        assert_eq!(acts(&tr), vec![99, 101, 99, 101, 99, 101]);
        let reads: Vec<u32> = tr
            .commands
            .iter()
            .filter(|c| c.kind == CommandKind::Rd)
            .map(|c| c.address.row)
            .collect();
        assert_eq!(reads, vec![98, 99, 100, 101, 102]);
        assert!(validate_trace(&tr).is_empty());
    }

    #[test]
    fn empty_attack_only_reads_back() {
        let cfg = AttackConfig::from_counts(X, 0, 0);
        let tr = compile_counter_bypass(&cfg, &geom(), &TimingParams::default()).unwrap();
        assert_eq!(tr.count(CommandKind::Act), 0);
        assert_eq!(tr.count(CommandKind::Rd), 5);
        assert!(tr
            .commands
            .iter()
            .all(|c| matches!(c.kind, CommandKind::Rd | CommandKind::Pre)));
    }

    #[test]
    fn round_robin_trace() {
        let cfg = AttackConfig::aavaa(X, 2, 2);
        let tr = compile_counter_bypass(&cfg, &geom(), &TimingParams::default()).unwrap();
        assert_eq!(acts(&tr), vec![99, 101, 98, 102, 99, 101, 98, 102]);
        let ticks: Vec<u64> = tr
            .commands
            .iter()
            .filter(|c| c.kind == CommandKind::Act)
            .map(|c| c.tick)
            .collect();
        assert_eq!(ticks[1] - ticks[0], 51);
    }

    #[test]
    fn short_tras_is_flagged() {
        let t = TimingParams::default();
        let tr = CommandTrace {
            timing: t,
            interleaving: Interleaving::Sequential,
            commands: vec![
                Command::new(CommandKind::Act, X, 0),
                Command::new(CommandKind::Pre, X, 10),
            ],
        };
        let v = validate_trace(&tr);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::Tras { pre_tick: 10, .. }));
    }

    #[test]
    fn short_trp_and_ordering() {
        let t = TimingParams::default();
        let tr = CommandTrace {
            timing: t,
            interleaving: Interleaving::Sequential,
            commands: vec![
                Command::new(CommandKind::Act, X, 0),
                Command::new(CommandKind::Pre, X, 39),
                Command::new(CommandKind::Act, X, 45),
                Command::new(CommandKind::Pre, X, 45),
            ],
        };
        let v = validate_trace(&tr);
        assert!(v.iter().any(|v| matches!(v, Violation::Trp { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::Ordering { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::Tras { .. })));
    }

    #[test]
    fn ddr4_2400_budget() {
        let t = TimingParams::default();
        let expected = (64e6_f64 / (51.0 * 0.833)).floor() as u64;
        assert_eq!(hammer_budget(&t), HammerBudget::Bounded(expected));
        let inf = TimingParams {
            trefw_ms: f64::INFINITY,
            ..t
        };
        assert_eq!(hammer_budget(&inf), HammerBudget::Unbounded);
    }

    #[test]
    fn budget_halves_when_slot_doubles() {
        let t = TimingParams::default();
        let t2 = TimingParams {
            tras_ck: 2 * t.tras_ck,
            trp_ck: 2 * t.trp_ck,
            ..t
        };
        let (HammerBudget::Bounded(a), HammerBudget::Bounded(b)) =
            (hammer_budget(&t), hammer_budget(&t2))
        else {
            panic!("bounded budgets expected");
        };
        assert!(a / 2 == b || a / 2 == b + 1, "{a} vs {b}");
    }

    #[test]
    fn budget_error_when_refresh_enabled() {
        let t = TimingParams {
            refresh_enabled: true,
            ..TimingParams::default()
        };
        let cfg = AttackConfig::double_sided(X, 1_000_000);
        let err = compile_counter_bypass(&cfg, &geom(), &t).unwrap_err();
        assert!(matches!(err, Error::Budget { .. }));
        assert_eq!(err.exit_code(), 2);
        // same attack is legal with refresh off
        let t_off = TimingParams::default();
        assert!(check_budget(&cfg, &t_off).is_ok());
    }

    #[test]
    fn trefw_violation_tracks_budget() {
        let t = TimingParams {
            refresh_enabled: true,
            trefw_ms: 0.01, // small window keeps the trace short
            ..TimingParams::default()
        };
        let HammerBudget::Bounded(budget) = hammer_budget(&t) else {
            panic!()
        };
        let build = |n: u64| {
            let mut commands = Vec::new();
            for k in 0..n {
                commands.push(Command::new(CommandKind::Act, X, k * t.slot_ck()));
                commands.push(Command::new(
                    CommandKind::Pre,
                    X,
                    k * t.slot_ck() + t.tras_ck as u64,
                ));
            }
            CommandTrace {
                timing: t,
                interleaving: Interleaving::Sequential,
                commands,
            }
        };
        assert!(validate_trace(&build(budget)).is_empty());
        let v = validate_trace(&build(budget + 1));
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::Trefw { .. }));
    }

    #[test]
    fn text_format_roundtrip() {
        let cfg = AttackConfig::aavaa(X, 1, 1);
        let tr = compile_counter_bypass(&cfg, &geom(), &TimingParams::default()).unwrap();
        let text = tr.to_text();
        assert!(text.starts_with("0 ACT 0 99\n39 PRE 0 99\n51 ACT 0 101\n"));
        assert!(text.contains(" RD 0 100 0\n"));
        assert_eq!(parse_commands(&text).unwrap(), tr.commands);
        assert!(parse_commands("1 FOO 0 0").is_err());
        assert!(parse_commands("1 ACT 0").is_err());
    }

    #[test]
    fn timing_validation() {
        let mut t = TimingParams::default();
        assert!(t.validate().is_ok());
        t.sleep_ck = 40;
        assert!(t.validate().is_err());
        t = TimingParams {
            tck_ns: 0.0,
            ..TimingParams::default()
        };
        assert!(matches!(t.validate(), Err(Error::Timing(_))));
    }
}
