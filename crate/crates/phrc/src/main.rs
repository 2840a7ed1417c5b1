fn main() {
    std::process::exit(phrc::cli::run(std::env::args_os()));
}
