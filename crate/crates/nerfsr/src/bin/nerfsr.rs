use clap::Parser;

fn main() {
    let cli = nerfsr::cli::Cli::parse();
    if let Err(e) = nerfsr::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
