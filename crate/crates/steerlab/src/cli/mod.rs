//! Command-line interface: configuration schema, subcommand dispatch, and
//! exit-code policy.

pub mod artifacts;
mod commands;
pub mod config;
mod evaluate;

pub use config::{scale_window, AblateConfig, DataConfig, EvalConfig, RunConfig, SteerSection, VectorsConfig};

use steerlab_nn::NnError;

use crate::error::{LabError, Result};

/// Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Nn(NnError::NonFinite { .. }) => 3,
        _ => 2,
    }
}

/// Machine-parsable one-line diagnostic for stderr.
pub fn diagnostic(err: &LabError) -> String {
    let kind = match err {
        LabError::Nn(NnError::NonFinite { .. }) => "non-finite",
        LabError::Nn(_) => "numeric-shape",
        LabError::Io { .. } => "io",
        LabError::Json { .. } => "json",
        LabError::Config(_) => "schema",
        LabError::DegenerateDirection { .. } => "degenerate-direction",
        LabError::OracleBelowFloor { .. } => "oracle-floor",
        LabError::BankMismatch(_) => "bank-mismatch",
        LabError::HookSite(_) => "hook-site",
        LabError::NotTrained(_) => "untrained-checkpoint",
        LabError::Invalid(_) => "validation",
    };
    let msg = err.to_string().replace('"', "'");
    format!("steerlab-error code={} kind={kind} msg=\"{msg}\"", exit_code(err))
}

/// Run one subcommand against a loaded configuration.
pub fn dispatch(subcommand: &str, cfg: &RunConfig) -> Result<()> {
    match subcommand {
        "gen-data" => commands::gen_data(cfg),
        "train" => commands::train_model(cfg),
        "train-oracle" => commands::train_oracle_cmd(cfg),
        "estimate" => commands::estimate(cfg),
        "pair" => commands::pair(cfg),
        "evaluate" => evaluate::evaluate(cfg),
        "ablate" => evaluate::ablate(cfg),
        "maps" => commands::maps(cfg),
        other => Err(LabError::Config(format!("unknown subcommand `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_error_classes() {
        let nan = LabError::Nn(NnError::NonFinite { op: "matmul", index: 0 });
        assert_eq!(exit_code(&nan), 3);
        assert!(diagnostic(&nan).contains("code=3"));
        assert!(diagnostic(&nan).contains("kind=non-finite"));

        let schema = LabError::Config("unknown key".into());
        assert_eq!(exit_code(&schema), 2);

        let degenerate = LabError::DegenerateDirection { layer: 1, step: 2, norm: 0.0 };
        assert_eq!(exit_code(&degenerate), 2);
        assert!(diagnostic(&degenerate).contains("kind=degenerate-direction"));

        let floor = LabError::OracleBelowFloor { accuracy: 0.5, floor: 0.95 };
        assert_eq!(exit_code(&floor), 2);
    }

    #[test]
    fn diagnostics_are_single_line() {
        let err = LabError::Config("multi\nline\nmessage".into());
        let diag = diagnostic(&err);
        // the message payload is quoted; the frame itself stays one line
        assert!(diag.starts_with("steerlab-error code=2"));
    }
}
