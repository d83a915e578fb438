fn main() {
    std::process::exit(bilevel_core::cli::main_with_args(std::env::args_os()));
}
