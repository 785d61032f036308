use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(omniseg::cli::run(std::env::args_os()))
}
