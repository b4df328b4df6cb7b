fn main() {
    std::process::exit(kmmaml::cli::run_from(std::env::args_os()));
}
