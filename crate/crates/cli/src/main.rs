//! `sacnn`: synthetic data, ground-truth densities, training, evaluation
//! and gradient checks from the command line.

mod commands;
mod settings;

use std::fmt;
use std::process::ExitCode;

use clap::Command;
use sacnn_core::{Error, ErrorClass};

use settings::{add_args, Key, Settings};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// A check ran to completion and failed.
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numeric => EXIT_NUMERIC,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Verification(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Handler = fn(&Settings) -> Result<(), CliError>;

struct Subcommand {
    name: &'static str,
    about: &'static str,
    outputs: &'static str,
    keys: &'static [Key],
    run: Handler,
}

const SUBCOMMANDS: &[Subcommand] = &[
    commands::SYNTH,
    commands::GEN_DENSITY,
    commands::TRAIN,
    commands::EVAL,
    commands::GRADCHECK,
];

fn cli() -> Command {
    let mut cmd = Command::new("sacnn")
        .about("Scale-adaptive crowd counting")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let c = Command::new(sub.name)
            .about(sub.about)
            .after_help(format!("Outputs:\n{}", sub.outputs));
        cmd = cmd.subcommand(add_args(c, sub.keys));
    }
    cmd
}

fn main() -> ExitCode {
    let mut cmd = cli();
    let matches = match cmd.try_get_matches_from_mut(std::env::args_os()) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = SUBCOMMANDS
        .iter()
        .find(|s| s.name == name)
        .expect("registered subcommand");
    let result = Settings::resolve(sub.keys, sub_matches).and_then(|settings| {
        println!("config: {}", settings.echo());
        (sub.run)(&settings)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                if let Some(c) = cmd.find_subcommand_mut(name) {
                    eprintln!("\n{}", c.render_usage());
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
