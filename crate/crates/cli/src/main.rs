use clap::Parser;

fn main() {
    let args = dmd_cli::cli::Args::parse();
    dmd_cli::cli::init_logging();
    if let Err(e) = dmd_cli::cli::dispatch(args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
