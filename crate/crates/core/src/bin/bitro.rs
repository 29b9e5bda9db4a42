fn main() {
    bitro::cli::run();
}
