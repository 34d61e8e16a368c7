use std::process::ExitCode;

use clap::Parser;
use corrdp::cli::{emit, run_command, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
        {
            eprintln!("corrdp: {e}");
            return ExitCode::from(1);
        }
    }
    match run_command(cli.command, cli.config.as_deref())
        .and_then(|out| emit(&out, cli.out.as_deref()).map(|_| out.status))
    {
        Ok(status) => ExitCode::from(status.exit_code()),
        Err(e) => {
            eprintln!("corrdp: {e}");
            ExitCode::from(1)
        }
    }
}
