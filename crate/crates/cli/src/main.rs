fn main() {
    std::process::exit(udocker_cli::main_with(std::env::args_os()));
}
