fn main() {
    std::process::exit(nmslope_cli::run(std::env::args_os()));
}
