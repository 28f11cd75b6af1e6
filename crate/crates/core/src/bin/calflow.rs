fn main() {
    std::process::exit(calflow::cli::run(std::env::args_os()));
}
