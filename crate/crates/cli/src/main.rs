fn main() {
    std::process::exit(metricsel_cli::main_with_args(std::env::args_os()));
}
