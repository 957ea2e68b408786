fn main() {
    std::process::exit(simoe_core::cli::run(std::env::args_os()));
}
