fn main() {
    std::process::exit(dpf::cli::run(std::env::args_os()));
}
