fn main() {
    std::process::exit(dg_core::cli::main_with_args(std::env::args()));
}
