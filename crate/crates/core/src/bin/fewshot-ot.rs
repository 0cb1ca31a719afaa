fn main() -> std::process::ExitCode {
    fewshot_ot::cli::main_with_args(std::env::args_os())
}
