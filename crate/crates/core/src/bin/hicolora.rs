fn main() {
    std::process::exit(hicolora::cli::main());
}
