fn main() {
    std::process::exit(satt::cli::run(std::env::args_os()));
}
