fn main() {
    std::process::exit(faceprop::cli::main_with_args(std::env::args_os()));
}
