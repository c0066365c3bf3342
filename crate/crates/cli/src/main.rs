fn main() {
    std::process::exit(faqd_cli::run(std::env::args_os()));
}
