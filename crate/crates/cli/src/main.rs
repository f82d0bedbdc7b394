fn main() {
    std::process::exit(uqkit_cli::cli(std::env::args_os()));
}
