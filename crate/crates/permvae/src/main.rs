fn main() {
    std::process::exit(permvae::cli::run());
}
