use clap::Parser;

use simcert::{run, Cli, Status};

fn main() {
    let outcome = run(Cli::parse());
    if outcome.status == Status::InputError {
        eprint!("{}", outcome.report);
    } else {
        print!("{}", outcome.report);
    }
    std::process::exit(outcome.status.code());
}
