fn main() {
    std::process::exit(bce3s::cli::main_with_args(std::env::args_os()));
}
