use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hammersim::anchors::parse_anchor_csv;
use hammersim::calibrate::{calibrate, CalibrationOptions};
use hammersim::config::{
    load_profile, parse_defense_spec, parse_experiment, parse_hc, profile_to_text, KeyValues,
};
use hammersim::feasibility::{feasibility, parse_cells_csv, verdicts_csv, FeasibilityOptions};
use hammersim::trace::compile_counter_bypass;
use hammersim::{
    classify_chip, find_optimal_set, log_grid, sweep, DefenseConfig, Engine, Error, MacPolicy,
    ReplayMode, Result, Surface, TimingParams,
};

#[derive(Parser)]
#[command(name = "hammersim", version, about = "Multi-sided RowHammer simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile an attack file into a DDR4 command trace.
    Compile {
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Replay an attack against a chip profile and an optional defense.
    Run {
        config: PathBuf,
        /// Preset name or profile file; overrides `profile` in the config.
        #[arg(short, long)]
        profile: Option<String>,
        /// Overrides the defense in the config, e.g. per_row:2M.
        #[arg(short, long)]
        defense: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the NRR log here as CSV.
        #[arg(long)]
        nrr_log: Option<PathBuf>,
        /// Replay every ACT even when no NRR can fire.
        #[arg(long)]
        full_replay: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a profile over an (S, T) grid.
    Sweep {
        #[command(flatten)]
        grid: Grid,
        /// Defenses to test each cell against, e.g. per_row:2M. Repeatable.
        #[arg(short, long)]
        defense: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Also write expected flips as a gnuplot nonuniform matrix.
        #[arg(long)]
        emit_plot_data: Option<PathBuf>,
    },
    /// Fit an analytic profile to an anchor CSV (S,T,flips).
    Calibrate {
        anchors: PathBuf,
        #[arg(long, default_value = "calibrated")]
        vendor: String,
        #[arg(long, default_value_t = 65536)]
        cells_per_row: u32,
        /// Pin the vulnerable fraction instead of fitting it.
        #[arg(long)]
        vulnerable_fraction: Option<f64>,
        /// Pin the interaction growth exponent instead of fitting it.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Bypass / FailedBypass classification of a profile.
    Classify {
        #[arg(short, long)]
        profile: String,
        /// Counter threshold: a count, `unlimited` or `untested`.
        #[arg(long, default_value = "untested")]
        t_mac: MacPolicy,
        #[arg(long, default_value_t = 970.0)]
        target: f64,
    },
    /// Most balanced (S, T) on a grid that reaches a flip target below T_dbl.
    Optimal {
        #[command(flatten)]
        grid: Grid,
        #[arg(long, default_value_t = 970.0)]
        target: f64,
    },
    /// Verdict per target cell: flippable, blocked or infeasible.
    Feasibility {
        #[arg(short, long)]
        profile: String,
        /// CSV with bank,row,cell,direction[,current].
        #[arg(long)]
        cells: PathBuf,
        #[arg(short, long)]
        defense: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bound attacks by one refresh window.
        #[arg(long)]
        refresh: bool,
        /// Largest per-row count considered.
        #[arg(long, default_value = "10M")]
        max_hc: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Grid {
    #[arg(short, long)]
    profile: String,
    /// Comma-separated counts and `lo:hi:n` log ranges.
    #[arg(long, default_value = "0,100k:10M:12")]
    s_values: String,
    #[arg(long, default_value = "0,100k:10M:12")]
    t_values: String,
    /// Mark cells that do not fit one refresh window.
    #[arg(long)]
    refresh: bool,
}

fn parse_values(spec: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [v] => out.push(parse_hc(v, "grid")?),
            [lo, hi, n] => {
                let n = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad point count in {item:?}")))?;
                out.extend(log_grid(parse_hc(lo, "grid")?, parse_hc(hi, "grid")?, n));
            }
            _ => return Err(Error::Config(format!("bad grid item {item:?}"))),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config(format!("empty grid {spec:?}")));
    }
    Ok(out)
}

fn timing(refresh: bool) -> TimingParams {
    TimingParams {
        refresh_enabled: refresh,
        ..Default::default()
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn grid_surface(grid: &Grid, defenses: &[DefenseConfig], seed: u64) -> Result<Surface> {
    let profile = load_profile(&grid.profile)?;
    let s = parse_values(&grid.s_values)?;
    let t = parse_values(&grid.t_values)?;
    sweep(&profile, &s, &t, defenses, &timing(grid.refresh), seed)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Compile { config, out } => {
            let kv = KeyValues::parse(&read(&config)?)?;
            let exp = parse_experiment(&kv)?;
            let geometry = exp.geometry.unwrap_or_default();
            let trace = compile_counter_bypass(&exp.attack, &geometry, &exp.timing)?;
            emit(out.as_deref(), &trace.to_text())
        }
        Command::Run {
            config,
            profile,
            defense,
            seed,
            nrr_log,
            full_replay,
            out,
        } => {
            let kv = KeyValues::parse(&read(&config)?)?;
            let exp = parse_experiment(&kv)?;
            let spec = profile.or(exp.profile).ok_or_else(|| {
                Error::Config("no profile: pass --profile or set `profile`".into())
            })?;
            let profile = load_profile(&spec)?;
            let defense = match defense {
                Some(d) => Some(parse_defense_spec(&d)?),
                None => exp.defense,
            };
            let engine = match exp.geometry {
                Some(g) => Engine::new(g, exp.timing)?,
                None => Engine::for_profile(&profile, exp.timing)?,
            };
            let engine = if full_replay {
                engine.with_replay(ReplayMode::Always)
            } else {
                engine
            };
            let report = engine.run(
                &profile,
                &exp.attack,
                defense.as_ref(),
                seed.or(exp.seed).unwrap_or(0),
            )?;
            if let Some(p) = nrr_log {
                fs::write(p, report.nrr_csv())?;
            }
            emit(out.as_deref(), &report.to_csv())
        }
        Command::Sweep {
            grid,
            defense,
            seed,
            out,
            emit_plot_data,
        } => {
            let defenses = defense
                .iter()
                .map(|d| parse_defense_spec(d))
                .collect::<Result<Vec<_>>>()?;
            let surface = grid_surface(&grid, &defenses, seed)?;
            if let Some(p) = emit_plot_data {
                fs::write(p, surface.to_plot_data())?;
            }
            emit(out.as_deref(), &surface.to_csv())
        }
        Command::Calibrate {
            anchors,
            vendor,
            cells_per_row,
            vulnerable_fraction,
            eta,
            out,
        } => {
            let anchors = parse_anchor_csv(&read(&anchors)?)?;
            let mut opts = CalibrationOptions {
                vendor_id: vendor,
                cells_per_row,
                ..Default::default()
            };
            if let Some(rho) = vulnerable_fraction {
                opts.fit_ceiling = false;
                opts.vulnerable_fraction = rho;
            }
            if let Some(eta) = eta {
                opts.fit_growth = false;
                opts.eta = eta;
            }
            let fit = calibrate(&anchors, &opts)?;
            let mut err = io::stderr().lock();
            writeln!(err, "S,T,observed,predicted,relative_error")?;
            for r in &fit.residuals {
                writeln!(
                    err,
                    "{},{},{},{:.1},{:.4}",
                    r.anchor.s, r.anchor.t, r.anchor.flips, r.predicted, r.relative_error
                )?;
            }
            writeln!(
                err,
                "mean relative error {:.2}%, max {:.2}%, column order preserved: {}",
                fit.mean_relative_error * 100.0,
                fit.max_relative_error * 100.0,
                fit.column_order_preserved
            )?;
            for w in &fit.warnings {
                writeln!(err, "warning: {w}")?;
            }
            emit(out.as_deref(), &profile_to_text(&fit.profile))
        }
        Command::Classify {
            profile,
            t_mac,
            target,
        } => {
            let profile = load_profile(&profile)?;
            let c = classify_chip(&profile, t_mac.threshold(), target);
            emit(None, &format!("{}: {c}\n", profile.vendor_id))
        }
        Command::Optimal { grid, target } => {
            let surface = grid_surface(&grid, &[], 0)?;
            let mut text = String::from("S,T,expected_flips,t_dbl,total_ratio,margin\n");
            match find_optimal_set(&surface, target) {
                Some(o) => {
                    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
                    text.push_str(&format!(
                        "{},{},{:.6},{},{},{}\n",
                        o.s,
                        o.t,
                        o.expected_flips,
                        o.t_dbl.map_or(String::new(), |t| t.to_string()),
                        opt(o.total_ratio()),
                        opt(o.margin())
                    ));
                }
                None => eprintln!("no interior cell reaches {target} flips below T_dbl"),
            }
            emit(None, &text)
        }
        Command::Feasibility {
            profile,
            cells,
            defense,
            seed,
            refresh,
            max_hc,
            out,
        } => {
            let profile = load_profile(&profile)?;
            let targets = parse_cells_csv(&read(&cells)?)?;
            let defense = defense.map(|d| parse_defense_spec(&d)).transpose()?;
            let opts = FeasibilityOptions {
                timing: timing(refresh),
                seed,
                max_hc: parse_hc(&max_hc, "max_hc")?,
            };
            let verdicts = feasibility(&profile, defense.as_ref(), &targets, &opts)?;
            emit(out.as_deref(), &verdicts_csv(&verdicts))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_lists() {
        assert_eq!(
            parse_values("0, 1M,500k,1M").unwrap(),
            vec![0, 500_000, 1_000_000]
        );
        let g = parse_values("0,100k:10M:12").unwrap();
        assert_eq!(g.len(), 13);
        assert_eq!(*g.last().unwrap(), 10_000_000);
        assert!(parse_values("1:2").is_err());
        assert!(parse_values("").is_err());
    }
}
