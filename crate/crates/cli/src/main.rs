mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> anyhow::Result<commands::Flags> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Sensitivity(a) => commands::sensitivity(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Contour(a) => commands::contour(a),
        Command::Wald(a) => commands::wald(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Power(a) => commands::power(a),
        Command::Oracle(a) => commands::oracle(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // exit code 2 is reserved for reliability warnings
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(flags) if flags.is_empty() => ExitCode::SUCCESS,
        Ok(flags) => {
            for f in flags {
                eprintln!("warning: {f}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
