fn main() {
    std::process::exit(ssot_cli::run(std::env::args_os()));
}
