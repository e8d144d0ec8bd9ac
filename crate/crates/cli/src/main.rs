fn main() {
    std::process::exit(gmscenet_cli::run(std::env::args_os()));
}
