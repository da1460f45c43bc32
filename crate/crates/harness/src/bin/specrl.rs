use std::process::ExitCode;

fn main() -> ExitCode {
    specrl_harness::cli::main()
}
