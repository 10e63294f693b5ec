use clap::Parser;
use pixeldistill::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIXELDISTILL_LOG", "warn")).init();
    std::process::exit(cli::run(Cli::parse()));
}
