use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fam_cli::run(std::env::args_os()) as u8)
}
