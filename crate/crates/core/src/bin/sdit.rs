fn main() {
    std::process::exit(sdit::cli::run(std::env::args_os()));
}
