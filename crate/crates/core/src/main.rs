fn main() {
    std::process::exit(multifuser::cli::run(std::env::args_os()));
}
