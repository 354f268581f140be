fn main() {
    std::process::exit(lht_cli::main_with_args(std::env::args_os()));
}
