fn main() {
    shadowlab::cli::main();
}
