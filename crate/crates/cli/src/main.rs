fn main() {
    std::process::exit(ceci_cli::run(std::env::args_os()));
}
