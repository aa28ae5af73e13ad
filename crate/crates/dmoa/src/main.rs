fn main() {
    std::process::exit(dmoa::cli::run());
}
