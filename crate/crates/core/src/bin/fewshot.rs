fn main() {
    std::process::exit(fewshot_core::cli::run(std::env::args().collect()));
}
