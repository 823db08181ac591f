use clap::Parser;

use debiaslab_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = debiaslab_cli::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
