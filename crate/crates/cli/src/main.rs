fn main() {
    std::process::exit(agerange_cli::run(std::env::args_os()));
}
