fn main() {
    std::process::exit(plora_cli::run(std::env::args()));
}
