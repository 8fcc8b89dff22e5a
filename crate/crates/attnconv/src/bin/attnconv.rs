fn main() {
    std::process::exit(attnconv::cli::cli_main(std::env::args_os()));
}
