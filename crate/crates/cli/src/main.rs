fn main() {
    std::process::exit(avfusion_cli::run_cli(std::env::args_os()));
}
