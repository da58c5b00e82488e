fn main() {
    std::process::exit(latent_align::cli::run(std::env::args_os().collect()));
}
