use std::process::ExitCode;

use clap::Parser;
use crossview_heat_cli::{execute, Cli, Outcome, StageStatus};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    match execute(&cli) {
        Ok(Outcome::Pipeline(m)) => {
            for s in &m.stages {
                let status = match s.status {
                    StageStatus::Completed => "completed",
                    StageStatus::Cached => "cached",
                    StageStatus::Skipped => "skipped",
                    StageStatus::Failed => "failed",
                };
                let records: Vec<String> = s.records.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{:<10} {:<10} {:>8.1}s  {}", s.stage, status, s.seconds, records.join(" "));
            }
            ExitCode::SUCCESS
        }
        Ok(Outcome::Standalone(out)) => {
            let records: Vec<String> = out.records.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("associate  completed  {}", records.join(" "));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

