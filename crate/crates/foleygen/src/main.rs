fn main() {
    std::process::exit(foleygen::cli::run(std::env::args_os()))
}
