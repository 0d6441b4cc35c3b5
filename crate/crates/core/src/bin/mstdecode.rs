fn main() {
    std::process::exit(mstdecode::cli::run(std::env::args()));
}
