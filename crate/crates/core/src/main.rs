fn main() {
    std::process::exit(mortality_gp::cli::main_with_args(std::env::args_os()));
}
