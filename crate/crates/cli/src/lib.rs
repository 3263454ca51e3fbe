//! Command implementations behind the `limbfit` binary.
//!
//! Every command is a plain function taking an options struct, so the binary
//! stays a thin argument parser and tests can drive the commands directly.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod evaluate;
pub mod fit;
pub mod gen;
pub mod gradcheck;
pub mod perturb;

pub use evaluate::{cmd_eval, EvalOptions, EvalTable};
pub use fit::{cmd_fit, FitOptions, FitSummary, FlowSource, InitMode, SegSource, WeightsPreset};
pub use gen::{cmd_gen, GenOptions};
pub use gradcheck::{cmd_gradcheck, run_gradcheck, GradcheckOptions, GradcheckTable, GRADCHECK_TOLERANCE};
pub use perturb::{cmd_perturb, PerturbOptions, PerturbSummary};

/// Exit code for a successful run.
pub const EXIT_OK: u8 = 0;
/// Exit code for invalid input, configuration or I/O failures.
pub const EXIT_VALIDATION: u8 = 1;
/// Exit code for numerical failures.
pub const EXIT_NUMERIC: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] limbfit::Error),
    #[error("gradient check failed: max relative error {worst:.3e} exceeds {tolerance:.0e}")]
    GradCheck { worst: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_VALIDATION,
            CliError::GradCheck { .. } => EXIT_NUMERIC,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Mixes a master seed with a stream index into an independent seed.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
