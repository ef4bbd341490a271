fn main() {
    std::process::exit(degbill_cli::run(std::env::args_os()));
}
