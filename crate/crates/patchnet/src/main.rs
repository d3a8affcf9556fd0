fn main() {
    std::process::exit(patchnet::cli::run(std::env::args_os()));
}
