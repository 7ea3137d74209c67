use std::process::ExitCode;

fn main() -> ExitCode {
    nepali_lm::cli::main()
}
