fn main() {
    dualrec::cli::main();
}
