fn main() {
    pdas_cli::init_logging();
    std::process::exit(pdas_cli::run(std::env::args_os()));
}
