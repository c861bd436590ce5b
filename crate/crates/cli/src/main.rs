use clap::Parser;
use sparsegpc_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("sparsegpc: {e}");
        std::process::exit(e.exit_code());
    }
}
