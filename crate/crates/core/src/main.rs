fn main() {
    std::process::exit(selmix::cli::run(std::env::args_os()));
}
