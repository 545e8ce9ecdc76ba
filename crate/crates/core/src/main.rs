fn main() {
    std::process::exit(preflab::cli::main_with_args(std::env::args_os().collect()));
}
