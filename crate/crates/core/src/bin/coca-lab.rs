fn main() {
    std::process::exit(coca_lab::cli::main());
}
