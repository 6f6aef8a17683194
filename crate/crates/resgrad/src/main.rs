fn main() {
    std::process::exit(resgrad::cli::run_cli(std::env::args()));
}
