fn main() {
    // Filled in once the pipeline is complete.
}
