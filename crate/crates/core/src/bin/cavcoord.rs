fn main() {
    std::process::exit(cavcoord::cli::run(std::env::args_os()));
}
