fn main() {
    std::process::exit(proxygrad::cli::main_with_args(std::env::args_os()));
}
