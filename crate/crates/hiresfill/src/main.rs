fn main() {
    std::process::exit(hiresfill::cli::run(std::env::args_os()));
}
