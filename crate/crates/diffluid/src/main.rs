use clap::Parser;
use diffluid::cli::{exit_code, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let outcome = run(&cli);
    if let Err(e) = &outcome {
        eprintln!("{e}");
    }
    std::process::exit(exit_code(&outcome));
}
