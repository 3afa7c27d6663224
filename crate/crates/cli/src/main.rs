use clap::Parser;

fn main() {
    segqa_cli::init_logging();
    let cli = segqa_cli::Cli::parse();
    if let Err(e) = segqa_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
