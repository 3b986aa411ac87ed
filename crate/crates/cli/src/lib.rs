//! Library half of the `htcl` binary: configuration resolution and subcommands.

pub mod commands;
pub mod config;

use htcl_core::HtclError;

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<HtclError>() {
        Some(HtclError::Config { .. }) => 2,
        Some(HtclError::Numeric(_)) | Some(HtclError::NonFiniteLoss { .. }) => 4,
        Some(_) => 3,
        None => 3,
    }
}
