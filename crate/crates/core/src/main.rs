fn main() {
    std::process::exit(contrastnet::cli::run(std::env::args_os()));
}
