fn main() {
    std::process::exit(wpt_core::cli::run());
}
