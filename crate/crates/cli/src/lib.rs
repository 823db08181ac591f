//! Command-line front end for the adversarial debiasing stack: dataset
//! generation, training (baseline / full / partial debias), ablation
//! attribution, and the three-model fairness comparison report.

pub mod args;
pub mod commands;
pub mod provenance;
pub mod svg;

use args::{Cli, Command};
use commands::CliError;
use debiaslab_core::scalar::Precision;

/// Compute precision comes from `DBLB_PRECISION`; training defaults to
/// f32 for speed, gradient verification wants f64.
fn precision_from_env() -> Result<Precision, CliError> {
    match std::env::var("DBLB_PRECISION") {
        Ok(v) => Precision::parse(&v).ok_or_else(|| {
            CliError::Usage(format!("DBLB_PRECISION must be 'f32' or 'f64', got '{v}'"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(Precision::F32),
        Err(std::env::VarError::NotUnicode(_)) => Err(CliError::Usage(
            "DBLB_PRECISION must be valid UTF-8".into(),
        )),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let precision = precision_from_env()?;
    match &cli.command {
        Command::Generate(a) => commands::cmd_generate(a),
        Command::Train(a) => match precision {
            Precision::F32 => commands::cmd_train::<f32>(a, precision),
            Precision::F64 => commands::cmd_train::<f64>(a, precision),
        },
        Command::Ablate(a) => match precision {
            Precision::F32 => commands::cmd_ablate::<f32>(a, precision),
            Precision::F64 => commands::cmd_ablate::<f64>(a, precision),
        },
        Command::Report(a) => match precision {
            Precision::F32 => commands::cmd_report::<f32>(a, precision),
            Precision::F64 => commands::cmd_report::<f64>(a, precision),
        },
    }
}
