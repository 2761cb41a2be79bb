fn main() {
    std::process::exit(sblwta::cli::run(std::env::args_os()));
}
