fn main() {
    std::process::exit(somnet::cli::main_with_args(std::env::args_os()));
}
