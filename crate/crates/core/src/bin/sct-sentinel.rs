fn main() {
    std::process::exit(sct_sentinel::cli::run(std::env::args_os()));
}
