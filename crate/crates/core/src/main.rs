fn main() {
    std::process::exit(rawglow::cli::main_impl(std::env::args_os()));
}
