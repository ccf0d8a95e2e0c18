fn main() {
    std::process::exit(livematch::cli::main_with_args(std::env::args_os()));
}
