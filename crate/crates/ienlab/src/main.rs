fn main() {
    std::process::exit(ienlab::cli::main_with_args(std::env::args_os()));
}
