use clap::Parser;

fn main() {
    let cli = bwssl_cli::app::Cli::parse();
    if let Err(e) = bwssl_cli::app::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
