fn main() {
    std::process::exit(kvevict::main_with_args(std::env::args_os()));
}
