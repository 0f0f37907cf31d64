fn main() {
    std::process::exit(pyramidflow_cli::run(std::env::args_os()));
}
