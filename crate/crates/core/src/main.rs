fn main() {
    std::process::exit(urbanctx::cli::run_cli(std::env::args_os()));
}
