fn main() {
    std::process::exit(phyrm_cli::run(std::env::args_os()));
}
