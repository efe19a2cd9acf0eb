fn main() {
    std::process::exit(pathguide::cli::run());
}
