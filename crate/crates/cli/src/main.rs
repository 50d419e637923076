use clap::Parser;
use dmldbp_cli::commands::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("dm-ldbp: {e}");
        std::process::exit(e.exit_code());
    }
}
