use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(regerr_cli::run(std::env::args_os()))
}
