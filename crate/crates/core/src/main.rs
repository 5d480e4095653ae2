fn main() {
    std::process::exit(lip2us::run_placeholder());
}
