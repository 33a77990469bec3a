fn main() {
    std::process::exit(fedcvlc::cli::main_with_args(std::env::args_os()));
}
