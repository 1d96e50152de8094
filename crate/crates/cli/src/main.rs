fn main() {
    std::process::exit(moflow_cli::run(std::env::args_os()));
}
