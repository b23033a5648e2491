use clap::Parser;

fn main() {
    let cli = sic_cli::Cli::parse();
    if let Err(err) = sic_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
