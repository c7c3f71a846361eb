use clap::Parser;

fn main() {
    let cli = reweight_cli::Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = reweight_cli::run(&cli, std::env::vars(), &mut stdout.lock()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
