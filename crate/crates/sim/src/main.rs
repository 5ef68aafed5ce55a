use clap::Parser;

use ciffreeda::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(cli::EXIT_OK);
        }
        Err(e) => {
            let _ = e.print();
            std::process::exit(cli::EXIT_USAGE);
        }
    };
    if let Err(e) = cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(cli::exit_code(&e));
    }
}
