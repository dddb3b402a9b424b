fn main() {
    std::process::exit(neurogen::cli::main_with(std::env::args_os()));
}
