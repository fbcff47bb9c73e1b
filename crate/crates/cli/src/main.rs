use clap::Parser;

fn main() {
    std::process::exit(ulike_cli::main_with(ulike_cli::Cli::parse()));
}
