fn main() {
    std::process::exit(noarb::cli::run(std::env::args_os()));
}
