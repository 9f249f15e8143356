fn main() {
    std::process::exit(fbpc_core::cli::main_with_args(std::env::args_os()));
}
