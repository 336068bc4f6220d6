fn main() {
    std::process::exit(primelab::cli::run(std::env::args_os()).code);
}
