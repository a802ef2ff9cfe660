fn main() {
    std::process::exit(stylelab::cli::run(std::env::args_os()));
}
