fn main() {
    // Filled in once the cli module lands.
}
