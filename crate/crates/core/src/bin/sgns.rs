fn main() {
    std::process::exit(sgns::cli::run(std::env::args_os()));
}
