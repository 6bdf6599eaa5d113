fn main() {
    std::process::exit(ircr::cli::run(std::env::args_os()));
}
