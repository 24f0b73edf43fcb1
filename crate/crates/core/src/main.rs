fn main() {
    std::process::exit(nda::cli::cli_main(std::env::args_os()));
}
