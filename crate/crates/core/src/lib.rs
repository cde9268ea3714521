//! Multi-sided RowHammer simulation.
//!
//! The crate models a DRAM bank at bit granularity, compiles double-sided,
//! ARVRA and AAVAA hammer schedules into timed DDR4 command traces, replays
//! them through counter-based defenses, and samples bit flips from a
//! calibrated per-cell disturbance model.

pub mod anchors;
pub mod attack;
pub mod calibrate;
pub mod config;
pub mod defense;
pub mod disturbance;
pub mod dram;
pub mod engine;
pub mod error;
pub mod feasibility;
pub mod optimize;
pub mod presets;
pub mod sweep;
pub mod trace;

pub use anchors::{Anchor, AnchorTable};
pub use attack::{AttackConfig, AttackModel, Interleaving};
pub use calibrate::{calibrate, Calibration, CalibrationOptions};
pub use defense::{DefenseConfig, DefenseKind, DefenseState, MacPolicy, NrrEvent};
pub use disturbance::{
    classify_chip, sample_flips, CellThresholds, ChipProfile, Classification, DisturbanceParams,
    ProfileMode,
};
pub use dram::{DataPattern, DramArrayState, DramGeometry, PhysicalMap, RowData, RowId};
pub use engine::{run_attack, Engine, FlipReport, ReplayMode, DEFAULT_TARGET};
pub use error::{Error, Result};
pub use feasibility::{feasibility, CellVerdict, FeasibilityOptions, TargetCell, Verdict};
pub use sweep::{find_optimal_set, log_grid, sweep, OptimalSet, Surface, SurfaceCell};
pub use trace::{
    compile_counter_bypass, hammer_budget, validate_trace, CommandTrace, TimingParams,
};
