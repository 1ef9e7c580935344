fn main() {
    std::process::exit(tkit::cli::run_cli(std::env::args_os()));
}
