use clap::Parser;
use pet_cli::{commands::execute, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match execute(&cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("pet: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
