use std::process::ExitCode;

fn main() -> ExitCode {
    convoy::cli::main()
}
