fn main() {
    std::process::exit(meff::cli::run(std::env::args_os()));
}
