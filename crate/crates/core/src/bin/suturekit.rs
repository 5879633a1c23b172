fn main() {
    std::process::exit(suturekit::cli::main_from_args(std::env::args_os()));
}
