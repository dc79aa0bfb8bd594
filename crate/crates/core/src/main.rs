fn main() {
    std::process::exit(taskres::cli::run(std::env::args()));
}
