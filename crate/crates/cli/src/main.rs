fn main() {
    std::process::exit(refinery_cli::run(std::env::args_os()));
}
