use clap::Parser;

fn main() {
    let cli = bayes_tca_cli::Cli::parse();
    match bayes_tca_cli::run(cli) {
        Ok(outcome) => {
            for f in &outcome.files {
                eprintln!("wrote {}", outcome.out_dir.join(f).display());
            }
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
