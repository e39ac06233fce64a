fn main() {
    std::process::exit(affectmt::cli::run());
}
