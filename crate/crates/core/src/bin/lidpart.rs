fn main() {
    std::process::exit(lidpart::cli::run_cli(std::env::args_os()));
}
