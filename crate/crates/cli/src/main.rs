fn main() {
    std::process::exit(corrnet_cli::run(std::env::args_os()));
}
