//! Thin binary over [`protoclip::cli`]: parse arguments, dispatch, and map
//! errors to the documented exit codes (0 ok, 2 config/schema error, 3
//! numerical failure).

use clap::Parser;
use protoclip::cli::{run, Cli};

fn main() {
    // clap exits 0 for --help/--version and 2 for usage errors on its own.
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
