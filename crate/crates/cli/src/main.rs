fn main() {
    std::process::exit(msmap::cli::run(std::env::args_os()));
}
