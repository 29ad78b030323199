fn main() {
    std::process::exit(fdt_core::trainer::cli::run_cli(std::env::args_os()));
}
