use std::process::ExitCode;

fn main() -> ExitCode {
    dropsel::cli::main_with_args(std::env::args_os())
}
