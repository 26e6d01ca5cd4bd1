fn main() {
    std::process::exit(adaptformer::cli::run(std::env::args_os()));
}
