fn main() {
    std::process::exit(sge::cli::run(std::env::args_os()));
}
