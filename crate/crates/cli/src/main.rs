use clap::Parser;

fn main() {
    let cli = almcodec_cli::Cli::parse();
    if let Err(e) = almcodec_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
