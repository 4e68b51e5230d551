use clap::Parser;

fn main() {
    let cli = irforge::cli::Cli::parse();
    std::process::exit(irforge::cli::run(cli));
}
