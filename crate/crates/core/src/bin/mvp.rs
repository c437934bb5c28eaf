fn main() {
    std::process::exit(mvp_core::cli::main());
}
