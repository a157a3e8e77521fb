fn main() {
    std::process::exit(rws_cli::run(std::env::args().collect()));
}
