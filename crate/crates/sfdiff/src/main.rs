fn main() {
    std::process::exit(sfdiff::cli::run(std::env::args_os()));
}
