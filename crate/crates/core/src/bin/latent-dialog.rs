fn main() {
    std::process::exit(latent_dialog::cli::run_from(std::env::args_os()));
}
