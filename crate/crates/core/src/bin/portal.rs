fn main() {
    std::process::exit(portal::cli::run(std::env::args_os()));
}
