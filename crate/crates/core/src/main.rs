fn main() {
    std::process::exit(sdaug::cli::run(std::env::args_os()));
}
