fn main() {
    std::process::exit(far::cli::run(std::env::args_os()));
}
