fn main() {
    std::process::exit(quantlab::cli::run(std::env::args_os()));
}
