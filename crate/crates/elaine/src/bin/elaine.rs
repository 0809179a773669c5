use std::process::ExitCode;

fn main() -> ExitCode {
    elaine::cli::run()
}
