use clap::Parser;
use graphprompt::cli::{run, Cli};

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    std::process::exit(run(cli));
}
