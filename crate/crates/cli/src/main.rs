mod args;
mod commands;
mod manifest;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command, StudyCommand};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Solve(a) => commands::solve(&cli.global, a),
        Command::Study { study } => match study {
            StudyCommand::Fig1 => commands::study_fig1(&cli.global),
            StudyCommand::Sweep(a) => commands::study_sweep(&cli.global, a),
            StudyCommand::Compare(a) => commands::study_compare(&cli.global, a),
        },
    }
}
