fn main() {
    std::process::exit(anycensus_core::cli::run());
}
