fn main() {
    std::process::exit(quicscope::cli::run(std::env::args_os()));
}
