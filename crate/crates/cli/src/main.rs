fn main() {
    std::process::exit(nar_cli::main_with(std::env::args_os()));
}
