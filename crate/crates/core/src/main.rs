fn main() {
    std::process::exit(ecoc::cli::run(std::env::args_os()));
}
