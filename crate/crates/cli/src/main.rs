use clap::Parser;

fn main() {
    let cli = denn_cli::Cli::parse();
    if let Err(e) = denn_cli::run(cli) {
        eprintln!("denn: error: {e}");
        std::process::exit(e.exit_code());
    }
}
