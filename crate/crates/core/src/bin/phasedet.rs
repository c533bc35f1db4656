use clap::Parser;

fn main() {
    let cli = phasedet::cli::Cli::parse();
    match phasedet::cli::run(cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
