//! `squidlet` command-line driver.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use clap::Command;

/// Exit 1 for anything the user can fix on the command line, 2 for
/// failures during the run itself.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(squidlet::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<squidlet::Error> for CliError {
    fn from(e: squidlet::Error) -> Self {
        use squidlet::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } | E::Usage(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| config::with_keys(Command::new(name).about(about), name);
    Command::new("squidlet")
        .about("Compress long contexts into memory tokens with a small decoder and answer from them with a larger one")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("data-gen", "Write a synthetic JSONL corpus to <out>/corpus.jsonl"))
        .subcommand(sub("train", "Run one or all training stages, checkpointing into <out>"))
        .subcommand(sub("eval", "Score restoration and answer accuracy per category"))
        .subcommand(sub("bench", "Time compressed vs full-context inference and count FLOPs"))
        .subcommand(sub("generate", "Answer, restore or continue from a compressed context"))
        .subcommand(sub("inspect-checkpoint", "Summarise a checkpoint"))
}

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    let matches = cli().try_get_matches_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        CliError::Usage(e.render().to_string())
    })?;
    let (name, m) = matches.subcommand().expect("subcommand required");
    let resolved = config::Resolved::new(name, m)?;
    eprint!("{}", resolved.header());
    if m.get_flag("dry_run") {
        return Ok(());
    }
    match name {
        "data-gen" => commands::data_gen(&resolved),
        "train" => commands::train(&resolved),
        "eval" => commands::eval(&resolved),
        "bench" => commands::bench(&resolved),
        "generate" => commands::generate(&resolved),
        "inspect-checkpoint" => commands::inspect(&resolved),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {}", m.trim_start_matches("error: ").trim_end());
            eprintln!("run `squidlet --help` for usage");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
