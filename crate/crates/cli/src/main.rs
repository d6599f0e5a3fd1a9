//! `ar` — fit and evaluate linear classifiers with large categorical
//! outputs: augment-and-reduce variational methods (softmax, multinomial
//! probit, multinomial logistic), a one-vs-each baseline, and an exact
//! softmax baseline.

mod opts;
mod runs;
mod selftest;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = opts::Cli::parse();
    let outcome = match cli.command {
        opts::Command::Train(args) => runs::train(args),
        opts::Command::Eval(args) => runs::eval(args),
        opts::Command::Selftest(args) => selftest::run(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
