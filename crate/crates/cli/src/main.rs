//! `petsynth` command line: phantom data, preparation, training, synthesis,
//! evaluation and false-positive reduction.

mod commands;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::Command;
use petsynth::ErrorClass;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(petsynth::Error),
}

impl From<petsynth::Error> for CliError {
    fn from(e: petsynth::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn cli() -> Command {
    let mut cmd = Command::new("petsynth")
        .about("CT to PET synthesis, SUV-split evaluation and PET-guided false-positive reduction")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in commands::COMMANDS {
        cmd = cmd.subcommand(settings::add_keys(Command::new(spec.name).about(spec.about), spec.keys));
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let spec = commands::COMMANDS.iter().find(|c| c.name == name).expect("registered command");
    let result = settings::Settings::resolve(spec.keys, sub).and_then(|s| (spec.run)(&s));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("petsynth {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
