use clap::Parser;

fn main() {
    let cli = exokin::cli::Cli::parse();
    match exokin::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exokin::cli::exit_code_for(&err));
        }
    }
}
