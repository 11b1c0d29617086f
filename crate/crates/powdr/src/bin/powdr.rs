fn main() {
    powdr::cli::main();
}
