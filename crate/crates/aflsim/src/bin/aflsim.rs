fn main() {
    std::process::exit(aflsim::cli::run(std::env::args()));
}
