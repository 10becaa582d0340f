use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(scbf::cli::main_entry(std::env::args()) as u8)
}
