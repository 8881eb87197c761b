fn main() {
    std::process::exit(roadseg::cli::run());
}
