fn main() {
    std::process::exit(dualcan::cli::main_from(std::env::args_os()).into());
}
