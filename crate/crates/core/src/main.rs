fn main() {
    std::process::exit(polemap::cli::run(std::env::args_os()));
}
