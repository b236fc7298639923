//! Experiment runner: configuration files, training and evaluation runs,
//! cost reports, gradient checks, heatmaps and the design comparison.
//!
//! Every command writes into one output directory with fixed file names:
//!
//! | file | written by |
//! |---|---|
//! | `config.toml` | every command taking `--out` (the resolved config) |
//! | `metrics.log` | `train` |
//! | `model.ckpt` | `train` |
//! | `flops.csv` | `flops` |
//! | `designs.csv`, `metrics_<variant>.log` | `compare-designs` |
//! | `frameNN_{spatial,temporal}.pgm` | `visualize` |

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::ExperimentConfig;

use stfocal::Error;

/// Process exit status for a failed command: 2 for configuration errors,
/// 3 for I/O and file-format errors, 4 for numeric faults.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Usage(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
    }
}
