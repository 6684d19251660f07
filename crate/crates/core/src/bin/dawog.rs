fn main() {
    std::process::exit(dawog::cli::run(std::env::args_os()));
}
