fn main() {
    std::process::exit(ecomac::cli::run(std::env::args_os()));
}
