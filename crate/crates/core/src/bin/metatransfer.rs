fn main() {
    std::process::exit(metatransfer::cli::run(std::env::args_os()));
}
