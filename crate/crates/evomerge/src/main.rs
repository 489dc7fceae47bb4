fn main() {
    std::process::exit(evomerge::cli::main());
}
