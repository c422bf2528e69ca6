fn main() {
    std::process::exit(hgpose::cli::run(std::env::args_os()));
}
