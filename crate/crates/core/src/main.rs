fn main() {
    std::process::exit(normshape::cli::run(std::env::args_os()));
}
