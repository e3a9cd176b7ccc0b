fn main() {
    std::process::exit(edgeseg::cli::run(std::env::args_os()));
}
