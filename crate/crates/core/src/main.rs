fn main() {
    std::process::exit(wmtract::cli::main_with_args(std::env::args_os()));
}
