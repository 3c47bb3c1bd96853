fn main() {
    std::process::exit(plaindet::cli::run(std::env::args_os()));
}
