fn main() {
    std::process::exit(blind_dps::cli::main_with_args(std::env::args_os()));
}
