mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::TsArgs;
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Build { model, seed, out } => commands::build_cmd(&model, seed, out.as_deref()),
        Command::Count {
            model,
            resolution,
            csv,
            golden,
        } => commands::count_cmd(&model, resolution, csv.as_deref(), golden),
        Command::Verify { suite, inject, seed } => commands::verify_cmd(suite, inject, seed),
        Command::Train { model, train, out } => commands::train_cmd(&model, &train, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            batch,
        } => commands::eval_cmd(&checkpoint, data.as_deref(), split, batch),
        Command::Norms {
            checkpoint,
            model,
            seed,
            out,
        } => commands::norms_cmd(checkpoint.as_deref(), &model, seed, out.as_deref()),
        Command::FitDecay {
            csv,
            values,
            stage,
            kind,
        } => commands::fit_decay_cmd(csv.as_deref(), values.as_deref(), stage, kind.as_deref()),
        Command::TsExpand {
            kind,
            beta,
            gamma,
            alpha,
            beta1,
            beta2,
            lags,
        } => commands::ts_expand_cmd(&TsArgs {
            kind,
            beta,
            gamma,
            alpha,
            beta1,
            beta2,
            lags,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
