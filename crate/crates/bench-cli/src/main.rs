use clap::Parser;

fn main() {
    let cli = dbsa_bench::Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = dbsa_bench::run(cli, &mut stdout.lock()) {
        eprintln!("error: {e:#}");
        std::process::exit(dbsa_bench::exit_code(&e));
    }
}
