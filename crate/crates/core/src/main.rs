use clap::Parser;

fn main() {
    let cli = odema::cli::Cli::parse();
    std::process::exit(odema::cli::run(cli));
}
