fn main() {
    std::process::exit(glfm::cli_io::run(std::env::args_os()));
}
