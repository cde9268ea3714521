use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("layout error: target row {row} needs rows {row}±2 inside 0..{rows_per_bank}")]
    Layout { row: u32, rows_per_bank: u32 },

    #[error("row data length mismatch: {0} vs {1} bits")]
    LengthMismatch(usize, usize),

    #[error("invalid data pattern: {0}")]
    Pattern(String),

    #[error("invalid physical map: {0}")]
    Map(String),

    #[error("invalid timing parameters: {0}")]
    Timing(String),

    #[error(
        "hammer budget exceeded: trace needs {needed} slots but one refresh window holds {budget}"
    )]
    Budget { needed: u64, budget: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid profile: {0}")]
    Profile(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("malformed cell address: {0}")]
    CellAddress(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Budget { .. } | Error::Timing(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
