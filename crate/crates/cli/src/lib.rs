//! Library side of the `croprot` binary: run configuration, subcommands and
//! the exit-code policy.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::RunConfig;

/// Process exit code for a failed command: 2 for configuration problems,
/// 3 for unreadable or malformed input, 4 for contract violations.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use croprot_core::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Infeasible(_) => 2,
                Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 3,
                Error::Contract(_) | Error::Dimension(_) | Error::Degenerate(_) => 4,
            };
        }
    }
    1
}
