fn main() {
    std::process::exit(localist_cli::cli::run_cli(std::env::args_os()));
}
