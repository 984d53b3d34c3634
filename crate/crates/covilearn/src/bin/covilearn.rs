fn main() {
    std::process::exit(covilearn::cli::run());
}
