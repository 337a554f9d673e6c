fn main() {
    std::process::exit(gcgvae::pipeline::cli(std::env::args()));
}
