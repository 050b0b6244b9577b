use clap::Parser;

fn main() {
    std::process::exit(depthcal_cli::run(depthcal_cli::Cli::parse()));
}
