//! Library side of the `tmlab` binary: config parsing and subcommands.

pub mod commands;
pub mod config;

use tmlab_core::Error;

/// Process exit code for a failed command: 2 for bad input, 3 for data or
/// checkpoint inconsistencies, 4 for numeric failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Io { .. }
        | Error::InvalidInput(_)
        | Error::EmptyDataset(_)
        | Error::ShiftOutOfRange { .. }
        | Error::Encoding { .. } => 2,
        Error::Parse { .. } | Error::Dimension(_) | Error::Checkpoint(_) | Error::Unlabeled(_) | Error::MissingCache => 3,
        Error::Numeric(_) => 4,
    }
}
