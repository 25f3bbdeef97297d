use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mtdml::cli::main_with_args(std::env::args_os()))
}
