fn main() {
    std::process::exit(confts_cli::run(std::env::args_os()));
}
