fn main() {
    std::process::exit(primsketch::cli::run(std::env::args_os()));
}
