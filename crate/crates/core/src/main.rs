use clap::Parser;

fn main() {
    let cli = covbound::cli::Cli::parse();
    std::process::exit(covbound::cli::run(cli));
}
