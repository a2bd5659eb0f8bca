fn main() {
    std::process::exit(hqdet::cli::run_cli(std::env::args_os()));
}
