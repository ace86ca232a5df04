fn main() {
    std::process::exit(mdta2g::cli::run(std::env::args_os()));
}
