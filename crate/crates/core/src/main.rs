use std::io::Write;

use clap::Parser;
use recicl::cli::{exit_code, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = run(&cli, std::env::args().collect());
    let code = exit_code(&result);
    match result {
        Ok(out) => {
            let text = if cli.json {
                serde_json::to_string_pretty(&out.json).expect("JSON values serialize")
            } else {
                out.human
            };
            // a closed pipe (e.g. `| head`) is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{text}");
        }
        Err(e) => eprintln!("error: {e}"),
    }
    std::process::exit(code);
}
