fn main() {
    std::process::exit(tmpa::cli::run(std::env::args_os()));
}
