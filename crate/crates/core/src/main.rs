fn main() {
    std::process::exit(pvmpc_core::cli::main_with(std::env::args_os().collect()));
}
