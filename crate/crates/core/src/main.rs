fn main() {
    std::process::exit(hasd::cli::run(std::env::args_os()));
}
