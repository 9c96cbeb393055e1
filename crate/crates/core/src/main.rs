fn main() {
    std::process::exit(bevmotion::cli::run(std::env::args_os()));
}
