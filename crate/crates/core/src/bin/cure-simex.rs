fn main() -> std::process::ExitCode {
    cure_simex::cli::main_with_args(std::env::args_os())
}
