fn main() {
    std::process::exit(ccr_cli::run(std::env::args_os()));
}
