fn main() {
    std::process::exit(kvsched::cli::main_with_args(std::env::args_os()));
}
