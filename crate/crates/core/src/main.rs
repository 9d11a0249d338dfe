fn main() {
    std::process::exit(endoloop::cli::run(std::env::args_os()));
}
