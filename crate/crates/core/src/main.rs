fn main() {
    std::process::exit(les::cli::run());
}
