fn main() {
    std::process::exit(dcdl::cli::run(std::env::args_os()));
}
