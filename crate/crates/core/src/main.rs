fn main() {
    std::process::exit(bcmq::cli::main_with_args(std::env::args_os()));
}
