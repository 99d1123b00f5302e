fn main() {
    std::process::exit(homlab::cli::main_with_args(std::env::args_os()));
}
