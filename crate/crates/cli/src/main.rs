use clap::Parser;
use scann_cli::config::Cli;

fn main() {
    let cli = Cli::parse();
    match scann_cli::run(&cli) {
        Ok(manifest) => eprintln!("wrote {}", manifest.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
