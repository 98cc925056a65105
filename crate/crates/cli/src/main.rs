fn main() {
    std::process::exit(ddalm_cli::cli::main_with_args(std::env::args_os()));
}
