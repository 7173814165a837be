fn main() {
    std::process::exit(xakd::cli::main());
}
