fn main() {
    std::process::exit(gtr::cli::main());
}
