fn main() {
    std::process::exit(sae_core::cli::run(std::env::args_os()));
}
