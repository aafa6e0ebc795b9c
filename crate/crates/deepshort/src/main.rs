fn main() {
    std::process::exit(deepshort::harness::cli::run());
}
