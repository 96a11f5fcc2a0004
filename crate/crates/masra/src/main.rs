fn main() {
    std::process::exit(masra::harness::cli::run(std::env::args_os()));
}
