use std::process::ExitCode;

use clap::Parser;

use chanprune_cli::commands::run;
use chanprune_cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (cmd, overrides) = Cli::parse().command.split();
    let result = overrides.resolve().and_then(|cfg| run(cmd, &cfg).map(|s| (cfg, s)));
    match result {
        Ok((cfg, summary)) if summary.ok() => {
            println!("{}: {} seed(s) completed, summary in {}", summary.command, summary.seeds.len(), cfg.out.join("summary.json").display());
            ExitCode::SUCCESS
        }
        Ok((_, summary)) => {
            for f in &summary.failed {
                eprintln!("seed {} failed: {}", f.seed, f.error);
            }
            let seeds: Vec<String> = summary.failed.iter().map(|f| f.seed.to_string()).collect();
            eprintln!("{}: failing seeds: {}", summary.command, seeds.join(", "));
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
