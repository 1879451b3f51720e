use std::process::ExitCode;

fn main() -> ExitCode {
    loragen::cli::main_with_args(std::env::args_os())
}
