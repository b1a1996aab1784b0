mod allocate;
mod codec;
mod error;
mod output;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pframe", version, about = "Learned P-frame codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs one stage of the training schedule.
    Train(train::TrainArgs),
    /// Codes a frame given its reference.
    Encode(codec::EncodeArgs),
    /// Reconstructs a frame from its reference and a stream.
    Decode(codec::DecodeArgs),
    /// Reports MS-SSIM between two frames.
    Evaluate(codec::EvaluateArgs),
    /// Assigns a model to every sequence within a size budget.
    Allocate(allocate::AllocateArgs),
    /// Prints the headers of a model or stream.
    Inspect(codec::InspectArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Encode(a) => codec::encode(a),
        Command::Decode(a) => codec::decode(a),
        Command::Evaluate(a) => codec::evaluate(a),
        Command::Allocate(a) => allocate::run(a),
        Command::Inspect(a) => codec::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
