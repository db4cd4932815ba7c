fn main() {
    std::process::exit(rtse::cli::run(std::env::args_os()));
}
